"""Offline dual ensemble Kalman filter.

The particle system is simulated backward in time from i.i.d. draws of the
terminal dual covariance. Each step perturbs every particle by one call of the
black-box simulator (with Brownian exploration input) plus a mean-field
coupling that depends only on the ensemble mean and covariance. The empirical
covariance then tracks the dual Riccati solution S_t and its (scaled) inverse
tracks P_t.

Arrays carry a leading batch axis over independent seeds so that Monte Carlo
sweeps run as one vectorised simulation; a single run is a batch of one.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import CostKind, LinearDynamics, LqProblem, require_valid, sym
from .riccati import terminal_dual
from .rng import Channel, CounterStream, stream

RESCUE_JITTER = 1e-8
RECORDABLE = ("mean", "cov", "prec")


class DegenerateEnsembleError(ValueError):
    pass


class SingularCovarianceError(ArithmeticError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"empirical covariance is singular at step {step}{': ' + detail if detail else ''}")
        self.step = step


@dataclass(frozen=True)
class EnkfConfig:
    """Run parameters.

    ``chunk_size`` fixes how particles are split into work units and
    ``workers`` how many threads process them; outputs depend on neither.
    ``record`` selects which per-step trajectories are stored.
    """

    N: int
    T: float
    tau: float = 0.02
    seed: int = 0
    jitter: float = 0.0
    chunk_size: Optional[int] = None
    workers: int = 1
    record: tuple = RECORDABLE

    def __post_init__(self):
        if self.N < 2:
            raise DegenerateEnsembleError("need at least two particles")
        if not (self.T > 0 and self.tau > 0):
            raise ValueError("T and tau must be positive")
        K = int(round(self.T / self.tau))
        if K < 1 or abs(K * self.tau - self.T) > 1e-9 * max(self.T, 1.0):
            raise ValueError(f"tau={self.tau} does not divide T={self.T}")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        bad = set(self.record) - set(RECORDABLE)
        if bad:
            raise ValueError(f"unknown record fields {sorted(bad)}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.tau))


@dataclass
class Ensemble:
    particles: np.ndarray  # (N, d)
    step_index: int
    ids: np.ndarray = None  # RNG substream id per particle

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        if self.ids is None:
            self.ids = np.arange(len(self.particles))
        self.ids = np.asarray(self.ids, dtype=np.int64)

    @property
    def N(self) -> int:
        return self.particles.shape[0]


@dataclass
class EnkfOutput:
    times: np.ndarray
    mean: Optional[np.ndarray]  # (K+1, d)
    cov: Optional[np.ndarray]  # (K+1, d, d)
    prec: Optional[np.ndarray]  # (K+1, d, d); NaN where S is not invertible
    final: Ensemble
    seed: int
    tau: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def S_bar(self) -> np.ndarray:
        return self.cov[0]

    @property
    def P_bar(self) -> np.ndarray:
        return self.prec[0]

    def to_csv(self, path) -> None:
        """One row per step: t, mean components, S entries, P entries (row-major)."""
        K1 = len(self.times)
        d = self.final.particles.shape[1]
        header, cols = ["t"], [self.times[:, None]]
        if self.mean is not None:
            header += [f"n_{i}" for i in range(d)]
            cols.append(self.mean)
        for name, arr in (("S", self.cov), ("P", self.prec)):
            if arr is not None:
                header += [f"{name}_{i}_{j}" for i in range(d) for j in range(d)]
                cols.append(arr.reshape(K1, d * d))
        table = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in table:
                w.writerow([repr(float(v)) for v in row])

    def save_snapshot(self, path) -> None:
        arrays = {"times": self.times, "particles": self.final.particles, "ids": self.final.ids,
                  "step_index": np.array(self.final.step_index), "seed": np.array(self.seed, dtype=np.uint64),
                  "tau": np.array(self.tau)}
        for name in RECORDABLE:
            if getattr(self, name) is not None:
                arrays[name] = getattr(self, name)
        np.savez(path, **arrays)

    @classmethod
    def load_snapshot(cls, path) -> "EnkfOutput":
        with np.load(path) as z:
            get = lambda k: z[k] if k in z.files else None  # noqa: E731
            return cls(times=z["times"], mean=get("mean"), cov=get("cov"), prec=get("prec"),
                       final=Ensemble(z["particles"], int(z["step_index"]), z["ids"]),
                       seed=int(z["seed"]), tau=float(z["tau"]))


# --------------------------------------------------------------------------
# building blocks


def sample_terminal(N: int, S_T: np.ndarray, rng, step_index: int = 0, ids=None) -> Ensemble:
    """N i.i.d. draws of N(0, S_T) through the Cholesky factor of S_T."""
    try:
        L = np.linalg.cholesky(sym(np.asarray(S_T, dtype=float)))
    except np.linalg.LinAlgError:
        raise ValueError("terminal covariance is not positive definite") from None
    ids = np.arange(N) if ids is None else np.asarray(ids, dtype=np.int64)
    Z = stream(rng).normals(Channel.TERMINAL, step_index, L.shape[0], ids)
    return Ensemble(Z @ L.T, step_index, ids)


def empirical_moments(ensemble, C: np.ndarray):
    """Mean, unbiased covariance and cross-covariance L = 1/(N-1) sum (Y-n)(CY-Cn)^T.

    Accepts an :class:`Ensemble` or an array whose second-to-last axis indexes
    particles.
    """
    Y = ensemble.particles if isinstance(ensemble, Ensemble) else np.asarray(ensemble, dtype=float)
    N = Y.shape[-2]
    if N < 2:
        raise DegenerateEnsembleError("empirical moments need N >= 2")
    n = Y.mean(axis=-2)
    E = Y - n[..., None, :]
    Et = np.swapaxes(E, -1, -2)
    S = sym(Et @ E) / (N - 1)
    L = (Et @ (E @ C.T)) / (N - 1)
    return n, S, L


def exploration_covariance(problem: LqProblem) -> np.ndarray:
    """Covariance of the exploration Brownian input: R^-1, or (|theta| R)^-1 for LEQG."""
    R = problem.cost.R
    return sym(np.linalg.inv(problem.cost.abs_theta * R))


def _field_weights(problem: LqProblem) -> tuple[float, float]:
    """Weights of the cost-driven and noise-driven parts of the coupling."""
    if problem.kind is CostKind.LQG:
        return 0.5, 0.5
    th = problem.cost.theta
    return 0.5 * abs(th), (1.0 if th > 0 else 0.0)


def _spd_inv(S: np.ndarray, jitter: float, step: int, counter: dict) -> np.ndarray:
    """Batched SPD inverse with one jitter rescue per failing element."""
    d = S.shape[-1]
    I = np.eye(d)
    scale = np.trace(S, axis1=-2, axis2=-1)[..., None, None] / d
    if jitter > 0:
        S = S + jitter * scale * I
    counter["coupling_inversions"] += S.shape[0] if S.ndim == 3 else 1
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        Sb = S.reshape(-1, d, d)
        L = np.empty_like(Sb)
        for b in range(Sb.shape[0]):
            try:
                L[b] = np.linalg.cholesky(Sb[b])
            except np.linalg.LinAlgError:
                counter["jitter_rescues"] += 1
                try:
                    L[b] = np.linalg.cholesky(Sb[b] + RESCUE_JITTER * scale.reshape(-1)[b] * I)
                except np.linalg.LinAlgError:
                    raise SingularCovarianceError(step, "jitter rescue failed") from None
        L = L.reshape(S.shape)
    Linv = np.linalg.inv(L)
    return sym(np.swapaxes(Linv, -1, -2) @ Linv)


def _coupling(problem: LqProblem, S, L, jitter, step, counter):
    """Linear maps of the two coupling fields and S^-1 (None if not needed).

    The coupling is  wI * L C (z + n)  +  wC * Sigma S^-1 (z - n).
    """
    wI, wC = _field_weights(problem)
    M_I = wI * (L @ problem.cost.C)
    if wC == 0.0 or not np.any(problem.dynamics.Sigma):
        return M_I, None, None
    Sinv = _spd_inv(S, jitter, step, counter)
    return M_I, wC * (problem.dynamics.Sigma @ Sinv), Sinv


def mean_field_term(z: np.ndarray, n: np.ndarray, S: np.ndarray, problem: LqProblem,
                    jitter: float = 0.0, step: int = -1) -> np.ndarray:
    """Mean-field coupling evaluated at particle(s) ``z`` given ensemble mean and covariance.

    For risk-seeking LEQG (theta < 0) only the cost-driven field is present and
    S is never inverted.
    """
    z = np.asarray(z, dtype=float)
    n = np.asarray(n, dtype=float)
    S = sym(np.asarray(S, dtype=float))
    L = S @ problem.cost.C.T
    counter = {"coupling_inversions": 0, "jitter_rescues": 0}
    M_I, M_C, _ = _coupling(problem, S, L, jitter, step, counter)
    out = (z + n) @ M_I.T
    if M_C is not None:
        out = out + (z - n) @ M_C.T
    return out


def simulator_step(x: np.ndarray, a: np.ndarray, tau: float, noise, dynamics: LinearDynamics) -> np.ndarray:
    """Increment (Ax + Ba) tau + sigma dW with dW ~ N(0, tau I).

    ``noise`` is either a ``numpy.random.Generator`` or an array of standard
    normals with trailing dimension q (scaled by sqrt(tau) here).
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    drift = (x @ dynamics.A.T + a @ dynamics.B.T) * tau
    if isinstance(noise, np.random.Generator):
        shape = np.broadcast_shapes(x.shape[:-1], a.shape[:-1]) + (dynamics.q,)
        noise = noise.standard_normal(shape)
    return drift + np.sqrt(tau) * (np.asarray(noise) @ dynamics.sigma.T)


class Simulator:
    """Black-box simulator with its own counter-based noise stream.

    Every call consumes one fresh step of the stream, so a sequence of calls is
    reproducible from the seed alone.
    """

    def __init__(self, dynamics: LinearDynamics, seed, channel: int = Channel.PROBE, sub: int = 0):
        self.dynamics = dynamics
        self.stream = stream(seed)
        self.channel = channel
        self.sub = sub
        self.calls = 0

    def __call__(self, x, a, tau: float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        lead = np.broadcast_shapes(x.shape[:-1], a.shape[:-1])
        count = int(np.prod(lead)) if lead else 1
        xi = self.stream.normals(self.channel, self.calls, self.dynamics.q, n=count, sub=self.sub)
        self.calls += 1
        return simulator_step(x, a, tau, xi.reshape(lead + (self.dynamics.q,)), self.dynamics)


# --------------------------------------------------------------------------
# the offline algorithm


def run_offline(problem: LqProblem, config: EnkfConfig, ids=None) -> EnkfOutput:
    """Dual EnKF for one seed (``config.seed``)."""
    return run_offline_batch(problem, config, [config.seed], ids=ids)[0]


def run_offline_batch(problem: LqProblem, config: EnkfConfig, seeds: Sequence[int],
                      ids=None) -> list[EnkfOutput]:
    """Dual EnKF for several independent seeds, simulated side by side.

    Each seed's output is the same (to rounding) as a separate
    :func:`run_offline` call with that seed.
    """
    require_valid(problem)
    d, m, q = problem.d, problem.m, problem.dynamics.q
    N, K, tau = config.N, config.steps, config.tau
    streams = [CounterStream(s) for s in seeds]
    nb = len(streams)
    ids = np.arange(N) if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.shape != (N,) or len(np.unique(ids)) != N:
        raise ValueError("ids must be N distinct stream identifiers")
    order = np.argsort(ids, kind="stable")
    reorder = not np.array_equal(order, np.arange(N))

    dyn, C = problem.dynamics, problem.cost.C
    scale = problem.cost.abs_theta
    L_eta = np.linalg.cholesky(exploration_covariance(problem) * tau)
    L_T = np.linalg.cholesky(terminal_dual(problem))

    def draw(channel, step, dim, sel):
        return np.stack([st.normals(channel, step, dim, sel) for st in streams])

    Y = draw(Channel.TERMINAL, K, d, ids) @ L_T.T  # (B, N, d)

    rec = {name: np.full((K + 1, nb) + ((d,) if name == "mean" else (d, d)), np.nan)
           for name in config.record}
    diag = {"coupling_inversions": 0, "jitter_rescues": 0, "recovery_inversions": 0,
            "recovery_failures": 0}

    cs = config.chunk_size or N
    chunks = [(a, min(a + cs, N)) for a in range(0, N, cs)]
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and len(chunks) > 1 else None

    def record(k, n, S, Sinv):
        if "mean" in rec:
            rec["mean"][k] = n
        if "cov" in rec:
            rec["cov"][k] = S
        if "prec" in rec:
            if Sinv is None:
                Sinv = _recover_inverse(S, diag)
            rec["prec"][k] = Sinv / scale

    try:
        for k in range(K, 0, -1):
            n, S, L = empirical_moments(Y[:, order] if reorder else Y, C)
            M_I, M_C, Sinv = _coupling(problem, S, L, config.jitter, k, diag)
            record(k, n, S, Sinv)
            nn = n[:, None, :]

            def advance(span, k=k, M_I=M_I, M_C=M_C, nn=nn):
                a, b = span
                Z = Y[:, a:b]
                sel = ids[a:b]
                d_eta = draw(Channel.ETA, k, m, sel) @ L_eta.T
                xi = draw(Channel.W, k, q, sel)
                dY = simulator_step(Z, d_eta / tau, tau, xi, dyn)
                mf = (Z + nn) @ np.swapaxes(M_I, -1, -2)
                if M_C is not None:
                    mf = mf + (Z - nn) @ np.swapaxes(M_C, -1, -2)
                return Z - (dY + tau * mf)

            parts = list(pool.map(advance, chunks)) if pool else [advance(c) for c in chunks]
            Y = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)
            if not np.all(np.isfinite(Y)):
                raise SingularCovarianceError(k - 1, "ensemble diverged")

        n, S, _ = empirical_moments(Y[:, order] if reorder else Y, C)
        Sinv = None
        if "prec" in rec and _field_weights(problem)[1] != 0.0 and np.any(dyn.Sigma):
            Sinv = _spd_inv(S, config.jitter, 0, diag)
        record(0, n, S, Sinv)
    finally:
        if pool:
            pool.shutdown()

    times = np.linspace(0.0, config.T, K + 1)
    outs = []
    for b, seed in enumerate(seeds):
        outs.append(EnkfOutput(
            times=times,
            mean=rec["mean"][:, b].copy() if "mean" in rec else None,
            cov=rec["cov"][:, b].copy() if "cov" in rec else None,
            prec=rec["prec"][:, b].copy() if "prec" in rec else None,
            final=Ensemble(Y[b].copy(), 0, ids.copy()),
            seed=int(seed),
            tau=tau,
            diagnostics=dict(diag, batch=nb),
        ))
    return outs


def _recover_inverse(S: np.ndarray, diag: dict) -> np.ndarray:
    """S^-1 for P recovery only; NaN where S is not positive definite."""
    diag["recovery_inversions"] += S.shape[0]
    try:
        Lc = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        Lc = np.full_like(S, np.nan)
        for b in range(S.shape[0]):
            try:
                Lc[b] = np.linalg.cholesky(S[b])
            except np.linalg.LinAlgError:
                diag["recovery_failures"] += 1
    ok = np.all(np.isfinite(Lc), axis=(-2, -1))
    out = np.full_like(S, np.nan)
    if np.any(ok):
        Li = np.linalg.inv(Lc[ok])
        out[ok] = sym(np.swapaxes(Li, -1, -2) @ Li)
    return out
