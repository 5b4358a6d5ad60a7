"""Control extraction from the particle approximation, and closed-loop simulation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .enkf import EnkfOutput, Simulator
from .model import LqProblem
from .rng import Channel, stream

DIVERGENCE_NORM = 1e12


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, time: float):
        super().__init__(f"closed-loop state exceeded {DIVERGENCE_NORM:g} at step {step} (t={time:.6g})")
        self.step = step
        self.time = time


@dataclass(frozen=True)
class GainSchedule:
    """Feedback gains u = K x.

    ``gains`` has shape (K+1, m, d) on ``times`` for a finite horizon, or
    (m, d) with ``times=None`` for a stationary gain.
    """

    gains: np.ndarray
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=float)
        if g.ndim not in (2, 3):
            raise ValueError("gains must be (m, d) or (K+1, m, d)")
        if not np.all(np.isfinite(g)):
            raise ValueError("gains contain non-finite entries")
        if g.ndim == 3 and (self.times is None or len(self.times) != g.shape[0]):
            raise ValueError("a time-varying schedule needs one time per gain")
        object.__setattr__(self, "gains", g)

    @property
    def stationary(self) -> bool:
        return self.gains.ndim == 2

    @property
    def final(self) -> np.ndarray:
        """The stationary gain, or the gain at t = 0 (the average-cost estimate)."""
        return self.gains if self.stationary else self.gains[0]

    def at_step(self, k: int, tau: float) -> np.ndarray:
        if self.stationary:
            return self.gains
        j = int(round(k * tau / (self.times[1] - self.times[0])))
        return self.gains[min(j, len(self.gains) - 1)]

    def __call__(self, k: int, x: np.ndarray, tau: float) -> np.ndarray:
        return x @ self.at_step(k, tau).T


@dataclass(frozen=True)
class OnlineConfig:
    N_e: int = 1
    tau: float = 0.02

    def __post_init__(self):
        if self.N_e < 1:
            raise ValueError("N_e must be at least 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


def gain_from_p(P: np.ndarray, problem: LqProblem) -> np.ndarray:
    """K = -R^-1 B^T P (works on stacks of P)."""
    B, R = problem.dynamics.B, problem.cost.R
    return -np.linalg.solve(R, B.T) @ np.asarray(P, dtype=float)


def gain_schedule(out: EnkfOutput, problem: LqProblem, stationary: Optional[bool] = None) -> GainSchedule:
    """Gains from the recovered P trajectory; stationary (from P_0) for average-cost problems."""
    if out.prec is None:
        raise ValueError("EnKF output did not record P")
    stationary = problem.is_average if stationary is None else stationary
    if stationary:
        return GainSchedule(gain_from_p(out.P_bar, problem))
    return GainSchedule(gain_from_p(out.prec, problem), out.times)


def empirical_q(x, a, P, tau: float, simulator: Callable, problem: LqProblem) -> np.ndarray:
    """One noisy evaluation of c(x, a) tau + x^T P S(x, a; tau) per leading index."""
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    incr = simulator(x, a, tau)
    return problem.cost.running(x, a) * tau + np.sum((x @ np.asarray(P)) * incr, axis=-1)


def probe_control(x, P, cfg: OnlineConfig, simulator: Callable, problem: LqProblem) -> np.ndarray:
    """Model-free control from simulator probes, without using B.

    Averages N_e evaluations of the empirical Q-function at a = 0 and at each
    probe direction a = R^-1 e_i; the finite difference, corrected for the
    known control cost, estimates the optimal control. ``x`` may be a stack of
    states (..., d); all probes for one call share a single simulator call.
    """
    x = np.asarray(x, dtype=float)
    m = problem.m
    tau = cfg.tau
    Rinv = np.linalg.inv(problem.cost.R)
    actions = np.vstack([np.zeros((1, m)), Rinv.T])  # row i+1 is R^-1 e_i
    lead = x.shape[:-1]
    xs = np.broadcast_to(x[..., None, None, :], lead + (m + 1, cfg.N_e, x.shape[-1]))
    acts = np.broadcast_to(actions[:, None, :], lead + (m + 1, cfg.N_e, m))
    q = empirical_q(xs, acts, P, tau, simulator, problem).mean(axis=-1)  # (..., m+1)
    M1, M2 = q[..., :1], q[..., 1:]
    return -(M2 - M1 - 0.5 * np.diag(Rinv) * tau) / tau


def probe_gain(P, cfg: OnlineConfig, simulator: Callable, problem: LqProblem) -> np.ndarray:
    """Gain estimate whose column j is the probed control at x = e_j."""
    return probe_control(np.eye(problem.d), P, cfg, simulator, problem).T


class ProbePolicy:
    """Closed-loop policy that queries the simulator at every step.

    Uses P_k at the matching step for a finite horizon, or P_0 for average cost.
    """

    def __init__(self, problem: LqProblem, P, cfg: OnlineConfig, seed, times=None):
        self.problem = problem
        self.P = np.asarray(P, dtype=float)
        self.times = times
        self.cfg = cfg
        self.simulator = Simulator(problem.dynamics, seed, Channel.PROBE)

    @classmethod
    def from_output(cls, out: EnkfOutput, problem: LqProblem, cfg: OnlineConfig, seed):
        if problem.is_average:
            return cls(problem, out.P_bar, cfg, seed)
        return cls(problem, out.prec, cfg, seed, out.times)

    def __call__(self, k: int, x: np.ndarray, tau: float) -> np.ndarray:
        P = self.P
        if P.ndim == 3:
            j = int(round(k * tau / (self.times[1] - self.times[0])))
            P = P[min(j, len(P) - 1)]
        return probe_control(x, P, self.cfg, self.simulator, self.problem)


Policy = Union[GainSchedule, ProbePolicy, Callable]


@dataclass
class Rollout:
    times: np.ndarray  # (K+1,)
    states: np.ndarray  # (K+1, n, d)
    controls: np.ndarray  # (K, n, m)
    cost: np.ndarray  # (K+1, n) accumulated running cost
    energy: np.ndarray  # (K+1, n) |X_t|^2

    @property
    def terminal_cost(self) -> np.ndarray:
        return self.cost[-1]

    def to_csv(self, path, run: int = 0) -> None:
        """t, state components, control components, cumulative cost, energy for one run."""
        d, m = self.states.shape[-1], self.controls.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i}" for i in range(d)] + [f"u_{i}" for i in range(m)]
                       + ["cost", "energy"])
            for k, t in enumerate(self.times):
                u = self.controls[k, run] if k < len(self.controls) else np.full(m, np.nan)
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k, run]]
                           + [repr(float(v)) for v in u]
                           + [repr(float(self.cost[k, run])), repr(float(self.energy[k, run]))])


def closed_loop_rollout(problem: LqProblem, policy: Policy, x0, T: float, tau: float,
                        seed, ids=None) -> Rollout:
    """Euler-Maruyama simulation of the true system under ``policy``.

    ``x0`` is (d,) or (n, d); row r uses noise substream ``ids[r]`` (default r).
    """
    K = int(round(T / tau))
    if K < 1 or abs(K * tau - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"tau={tau} does not divide T={T}")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x.shape
    dyn = problem.dynamics
    ids = np.arange(n) if ids is None else np.asarray(ids)
    st = stream(seed)
    states = np.empty((K + 1, n, d))
    controls = np.empty((K, n, problem.m))
    cost = np.zeros((K + 1, n))
    states[0] = x
    for k in range(K):
        u = np.asarray(policy(k, x, tau), dtype=float).reshape(n, problem.m)
        controls[k] = u
        cost[k + 1] = cost[k] + problem.cost.running(x, u) * tau
        xi = st.normals(Channel.ROLLOUT, k, dyn.q, ids)
        x = x + (x @ dyn.A.T + u @ dyn.B.T) * tau + np.sqrt(tau) * (xi @ dyn.sigma.T)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_NORM:
            raise DivergenceError(k + 1, (k + 1) * tau)
        states[k + 1] = x
    energy = np.sum(states * states, axis=-1)
    return Rollout(np.linspace(0.0, T, K + 1), states, controls, cost, energy)
