"""Particle covariance against the exact dual Riccati solution on a 4-state chain.

    python3 demos/riccati_tracking.py [N]
"""
import sys

import numpy as np

from dual_enkf import EnkfConfig, run_offline, solve_are, solve_dual_dre
from dual_enkf.bench import gen_spring_mass_damper

N = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
T, tau = 10.0, 0.02

prob = gen_spring_mass_damper(2, 0.1, T=T)
exact = solve_dual_dre(prob, T, 1e-3).on_grid(tau)
out = run_offline(prob, EnkfConfig(N=N, T=T, tau=tau, seed=0))
Pbar = solve_are(prob).P_bar

print(f"N = {N}, d = {prob.d}, {len(out.times) - 1} backward steps")
print(f"{'t':>6} {'|S_N - S|/|S|':>14} {'|P_N - Pbar|/|Pbar|':>20}")
for k in range(0, len(out.times), 50):
    eS = np.linalg.norm(out.cov[k] - exact.values[k]) / np.linalg.norm(exact.values[k])
    eP = np.linalg.norm(out.prec[k] - Pbar) / np.linalg.norm(Pbar)
    print(f"{out.times[k]:6.2f} {eS:14.4f} {eP:20.4f}")
