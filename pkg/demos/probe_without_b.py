"""Recover the optimal gain from simulator queries alone, without reading B.

The probed gain error falls like 1/N_e until it meets the floor set by the
particle estimate of P.

    python3 demos/probe_without_b.py
"""
import numpy as np

from dual_enkf import EnkfConfig, OnlineConfig, Simulator, gain_from_p, probe_gain, run_offline, solve_are
from dual_enkf.bench import gen_spring_mass_damper

prob = gen_spring_mass_damper(2, 0.1, T=10.0)
K_opt = gain_from_p(solve_are(prob).P_bar, prob)
P_N = run_offline(prob, EnkfConfig(N=400, T=10.0, seed=3, record=("prec",))).P_bar
floor = np.sum((gain_from_p(P_N, prob) - K_opt) ** 2)

sim = Simulator(prob.dynamics, seed=4)
print(f"floor |K(P_N) - K|^2 = {floor:.2e}")
print(f"{'N_e':>7} {'mean |K_probe - K|^2':>22}")
for N_e in (1, 4, 16, 64, 256, 1024, 4096):
    errs = [np.sum((probe_gain(P_N, OnlineConfig(N_e=N_e), sim, prob) - K_opt) ** 2) for _ in range(40)]
    print(f"{N_e:7d} {np.mean(errs):22.3e}")
