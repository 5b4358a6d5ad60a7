"""Learn a feedback gain from particles, then close the loop on the true system.

Compares the learned stationary gain with the optimal one and reports the
closed-loop average cost of both.

    python3 demos/learned_control.py
"""
import numpy as np

from dual_enkf import (EnkfConfig, GainSchedule, average_cost_lyapunov, closed_loop_rollout,
                       closed_loop_spectrum, gain_from_p, run_offline, solve_are)
from dual_enkf.bench import gen_spring_mass_damper

T, tau = 10.0, 0.02

for kind, theta in (("LQG", None), ("LEQG", 1.1), ("LEQG", -0.8)):
    prob = gen_spring_mass_damper(2, 0.3, kind=kind, theta=theta, T=T)
    out = run_offline(prob, EnkfConfig(N=500, T=T, tau=tau, seed=1))
    K = gain_from_p(out.P_bar, prob)
    K_opt = gain_from_p(solve_are(prob).P_bar, prob)
    ev, hurwitz = closed_loop_spectrum(prob, K)
    ro = closed_loop_rollout(prob, GainSchedule(K), np.ones((200, prob.d)), 5.0, tau, seed=2)
    label = kind if theta is None else f"{kind} theta={theta}"
    print(label)
    print(f"  relative gain error   {np.linalg.norm(K - K_opt) / np.linalg.norm(K_opt):.4f}")
    print(f"  slowest closed pole   {ev.real.max():.4f} (Hurwitz: {hurwitz})")
    print(f"  energy t=0 -> t=5     {ro.energy[0].mean():.3f} -> {ro.energy[-1].mean():.4f}")
    lqg = prob.with_cost("LQG", None)
    print(f"  LQG average cost      {average_cost_lyapunov(lqg, K):.5f} (optimal {average_cost_lyapunov(lqg, K_opt):.5f})")
