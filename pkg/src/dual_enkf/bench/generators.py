"""Benchmark problem families."""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..model import LqProblem
from ..rng import Channel, CounterStream


def toeplitz_chain(d_s: int) -> np.ndarray:
    """Tridiagonal Toeplitz matrix with 2 on the diagonal and -1 off it."""
    return 2.0 * np.eye(d_s) - np.eye(d_s, k=1) - np.eye(d_s, k=-1)


def gen_spring_mass_damper(d_s: int, sigma_scale: float = 0.1, flip_stability: bool = False,
                           kind: str = "LQG", theta: Optional[float] = None,
                           T: Optional[float] = None) -> LqProblem:
    """Chain of ``d_s`` unit masses with springs and dampers, state (positions, velocities).

    C, R and G are identities and sigma = sigma_scale * B. ``flip_stability``
    negates A, which makes the uncontrolled chain unstable.
    """
    if d_s < 1:
        raise ValueError("d_s must be >= 1")
    Tm = toeplitz_chain(d_s)
    Z, I = np.zeros((d_s, d_s)), np.eye(d_s)
    A = np.block([[Z, I], [-Tm, -Tm]])
    if flip_stability:
        A = -A
    B = np.vstack([Z, I])
    d = 2 * d_s
    return LqProblem.from_matrices(A, B, sigma_scale * B, np.eye(d), np.eye(d_s), np.eye(d),
                                   kind=kind, theta=theta, T=T)


def random_canonical_coefficients(d: int, seed: int) -> np.ndarray:
    """The i.i.d. N(0, 1) last row of the companion matrix for ``seed``."""
    return CounterStream(seed).normals(Channel.GENERATOR, 0, d, n=1)[0]


def gen_random_canonical(d: int, seed: int, sigma_scale: float = 0.1, kind: str = "LQG",
                         theta: Optional[float] = None, T: Optional[float] = None) -> LqProblem:
    """Random single-input system in controllable canonical form.

    A has ones on the superdiagonal and a last row of i.i.d. standard normals;
    B is the last basis vector; C, R, G are identities; sigma = sigma_scale * B.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    A = np.eye(d, k=1)
    A[-1] = random_canonical_coefficients(d, seed)
    B = np.zeros((d, 1))
    B[-1, 0] = 1.0
    return LqProblem.from_matrices(A, B, sigma_scale * B, np.eye(d), np.eye(1), np.eye(d),
                                   kind=kind, theta=theta, T=T)


def open_loop_unstable(problem: LqProblem) -> bool:
    return bool(np.any(np.linalg.eigvals(problem.dynamics.A).real > 0))


def first_converged_seed(d: int, T: float, rel_tol: float = 0.05, start: int = 0,
                         sigma_scale: float = 0.1, max_tries: int = 1000) -> int:
    """First random canonical seed whose exact DRE reaches P_bar by t = 0.

    Only the deterministic Riccati solutions are consulted:
    ||P_0 - P_bar||_F / ||P_bar||_F < rel_tol for horizon T.
    """
    from ..riccati import solve_are, solve_dre

    for seed in range(start, start + max_tries):
        prob = gen_random_canonical(d, seed, sigma_scale, T=T)
        P0 = solve_dre(prob, T, 1e-2).initial
        Pbar = solve_are(prob).P_bar
        if np.linalg.norm(P0 - Pbar) < rel_tol * np.linalg.norm(Pbar):
            return seed
    raise RuntimeError(f"no seed in [{start}, {start + max_tries}) converges within T={T}")
