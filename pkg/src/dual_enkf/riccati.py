"""Deterministic Riccati solvers used as ground truth for the particle system.

Time runs forward on the returned grids (t_0 = 0 < ... < t_K = T) but every
equation here is integrated backward from its terminal condition.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import CostKind, LqProblem, effective_matrices, sym

SPD_CHECK_EVERY = 100


class IntegrationError(ArithmeticError):
    """The Riccati flow left the SPD cone (or blew up)."""

    def __init__(self, msg: str, time: float):
        super().__init__(f"{msg} at t={time:.6g}")
        self.time = time


class ConvergenceError(ArithmeticError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


def _coefficients(problem: LqProblem):
    """Constant matrices shared by both Riccati operators."""
    D, Sigma = effective_matrices(problem)
    Q = problem.cost.Q
    if problem.kind is CostKind.LEQG:
        th = problem.cost.theta
        quad = sym(D - th * Sigma)
        return Q, quad, quad / abs(th), abs(th) * Q
    return Q, D, D, Q


def ricc_op(Lam: np.ndarray, problem: LqProblem) -> np.ndarray:
    """Primal Riccati operator: A'L + LA + C'C - L (D - theta Sigma) L."""
    A = problem.dynamics.A
    Q, quad, _, _ = _coefficients(problem)
    return _primal(Lam, A, Q, quad)


def dual_ricc_op(Lam: np.ndarray, problem: LqProblem) -> np.ndarray:
    """Dual Riccati operator: AL + LA' - (D - theta Sigma)/|theta| + |theta| L C'C L."""
    A = problem.dynamics.A
    _, _, const, quad = _coefficients(problem)
    return _dual(Lam, A, const, quad)


def _primal(L, A, Q, quad):
    AL = A.T @ L
    return sym(AL + AL.T + Q - L @ quad @ L)


def _dual(L, A, const, quad):
    AL = A @ L
    return sym(AL + AL.T - const + L @ quad @ L)


def s_to_p(S: np.ndarray, problem: LqProblem) -> np.ndarray:
    """P = S^-1 (LQG) or (|theta| S)^-1 (LEQG)."""
    return _spd_inverse(problem.cost.abs_theta * np.asarray(S, dtype=float))


def p_to_s(P: np.ndarray, problem: LqProblem) -> np.ndarray:
    return _spd_inverse(problem.cost.abs_theta * np.asarray(P, dtype=float))


def _spd_inverse(M: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(sym(M))  # raises LinAlgError for non-SPD input
    Linv = np.linalg.inv(L)
    return sym(np.swapaxes(Linv, -1, -2) @ Linv)


def terminal_dual(problem: LqProblem) -> np.ndarray:
    """S_T = G^-1 (LQG) or (|theta| G)^-1 (LEQG)."""
    return p_to_s(problem.cost.G, problem)


@dataclass(frozen=True)
class RiccatiTrajectory:
    times: np.ndarray
    values: np.ndarray  # (K+1, d, d)
    kind: str  # "primal" or "dual"
    step: float

    def __len__(self):
        return len(self.times)

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def subsample(self, every: int) -> "RiccatiTrajectory":
        return RiccatiTrajectory(self.times[::every], self.values[::every], self.kind, self.step * every)

    def on_grid(self, tau: float) -> "RiccatiTrajectory":
        """Restrict to a coarser grid of spacing ``tau`` (must be a multiple of the step)."""
        every = int(round(tau / self.step))
        if every < 1 or abs(every * self.step - tau) > 1e-9 * tau:
            raise ValueError(f"tau={tau} is not a multiple of the reference step {self.step}")
        return self.subsample(every)

    def to_csv(self, path) -> None:
        d = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "i", "j", "value"])
            for t, M in zip(self.times, self.values):
                for i in range(d):
                    for j in range(d):
                        w.writerow([repr(float(t)), i, j, repr(float(M[i, j]))])


def _grid(T: float, tau: float) -> int:
    if not (T > 0 and tau > 0):
        raise ValueError("T and tau_ref must be positive")
    K = int(round(T / tau))
    if K < 1 or abs(K * tau - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"tau_ref={tau} does not divide T={T}")
    return K


def _rk4_backward(f, X_T, T, tau, label, store=True):
    """Integrate dX/ds = f(X), s = T - t, from X_T; returns values on the forward grid.

    With ``store=False`` only the value at t = 0 is returned (shape (1, d, d)).
    """
    K = _grid(T, tau)
    h = T / K
    X = sym(np.array(X_T, dtype=float))
    out = np.empty((K + 1 if store else 1,) + X.shape)
    out[-1] = X
    for n in range(1, K + 1):
        k1 = f(X)
        k2 = f(X + 0.5 * h * k1)
        k3 = f(X + 0.5 * h * k2)
        k4 = f(X + h * k3)
        X = sym(X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        if store:
            out[K - n] = X
        if n % SPD_CHECK_EVERY == 0 or n == K:
            _check_spd(X, (K - n) * h, label)
    if not store:
        out[0] = X
    return np.linspace(0.0, T, K + 1), out, h


def _check_spd(X, t, label):
    if not np.all(np.isfinite(X)):
        raise IntegrationError(f"{label} solution is not finite", t)
    try:
        np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        raise IntegrationError(f"{label} solution lost positive definiteness", t) from None


def solve_dre(problem: LqProblem, T: Optional[float] = None, tau_ref: float = 1e-3) -> RiccatiTrajectory:
    """Primal DRE -dP/dt = D(P), P_T = G, by classical RK4."""
    T = problem.T if T is None else T
    if T is None:
        raise ValueError("average-cost problem needs an explicit T")
    A = problem.dynamics.A
    Q, quad, _, _ = _coefficients(problem)
    times, vals, h = _rk4_backward(lambda P: _primal(P, A, Q, quad), problem.cost.G, T, tau_ref, "DRE")
    return RiccatiTrajectory(times, vals, "primal", h)


def solve_dual_dre(problem: LqProblem, T: Optional[float] = None, tau_ref: float = 1e-3) -> RiccatiTrajectory:
    """Dual DRE dS/dt = D^dagger(S), S_T = G^-1 (or (|theta| G)^-1)."""
    T = problem.T if T is None else T
    if T is None:
        raise ValueError("average-cost problem needs an explicit T")
    A = problem.dynamics.A
    _, _, const, quad = _coefficients(problem)
    times, vals, h = _rk4_backward(lambda S: -_dual(S, A, const, quad), terminal_dual(problem),
                                   T, tau_ref, "dual DRE")
    return RiccatiTrajectory(times, vals, "dual", h)


@dataclass(frozen=True)
class AreSolution:
    P_bar: np.ndarray
    residual: float
    horizon_used: float
    history: tuple = field(default=())  # (horizon, residual) at each doubling

    def S_bar(self, problem: LqProblem) -> np.ndarray:
        return p_to_s(self.P_bar, problem)


def solve_are(problem: LqProblem, tol: float = 1e-8, tau_ref: float = 1e-2,
              horizon: float = 1.0, max_horizon: float = 1e3) -> AreSolution:
    """Stationary solution of the DRE by backward integration with horizon doubling.

    Integration continues from the current iterate, so the total horizon
    doubles each round until ||D(P)||_F < tol.
    """
    A = problem.dynamics.A
    Q, quad, _, _ = _coefficients(problem)
    f = lambda P: _primal(P, A, Q, quad)  # noqa: E731
    P = sym(np.array(problem.cost.G, dtype=float))
    total, chunk = 0.0, float(horizon)
    history = []
    res = float(np.linalg.norm(f(P)))
    while True:
        _, vals, _ = _rk4_backward(f, P, chunk, tau_ref, "ARE", store=False)
        P = vals[0]
        total += chunk
        res = float(np.linalg.norm(f(P)))
        history.append((total, res))
        if res < tol:
            return AreSolution(P, res, total, tuple(history))
        if total >= max_horizon:
            raise ConvergenceError(f"ARE not converged after horizon {total:g}", res)
        chunk = total
