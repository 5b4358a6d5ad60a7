"""Error metrics, scaling fits, spectral checks and closed-loop cost evaluation."""
from __future__ import annotations

import csv
import enum
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.integrate import trapezoid

from .model import CostKind, LqProblem, sym

SCHEMA_VERSION = 1


class UndefinedBaselineError(ZeroDivisionError):
    pass


class StabilityError(ArithmeticError):
    def __init__(self, eigenvalues: np.ndarray):
        bad = eigenvalues[eigenvalues.real >= 0]
        super().__init__(f"closed loop is not Hurwitz; offending eigenvalues: {np.array2string(bad, precision=4)}")
        self.eigenvalues = bad


class NonMonotoneWindowWarning(UserWarning):
    pass


class NormKind(str, enum.Enum):
    FROBENIUS = "Frobenius"
    RELATIVE = "RelativeFrobenius"


@dataclass(frozen=True)
class ErrorSeries:
    times: np.ndarray
    values: np.ndarray
    norm: NormKind = NormKind.FROBENIUS

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != np.shape(self.times):
            raise ValueError("times and values differ in length")
        if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
            raise ValueError("error values must be finite and nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "error"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


@dataclass(frozen=True)
class ScalingReport:
    N: tuple
    mse: tuple
    stderr: tuple
    slope: float
    intercept: float
    slope_halfwidth: float  # 95% confidence

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


@dataclass(frozen=True)
class CostReport:
    cost: float
    method: str  # "Lyapunov" or "MonteCarlo"
    eps_cost: Optional[float] = None
    eps_gain: Optional[float] = None
    stderr: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


# --------------------------------------------------------------------------
# errors and fits


def frob_error(M_hat, M_ref, relative: bool = False) -> float:
    M_hat, M_ref = np.asarray(M_hat, dtype=float), np.asarray(M_ref, dtype=float)
    if M_hat.shape != M_ref.shape:
        raise ValueError(f"shape mismatch {M_hat.shape} vs {M_ref.shape}")
    err = float(np.linalg.norm(M_hat - M_ref))
    if relative:
        base = float(np.linalg.norm(M_ref))
        if base == 0.0:
            raise UndefinedBaselineError("reference has zero norm")
        err /= base
    return err


def error_series(estimates, references, times, relative: bool = False) -> ErrorSeries:
    vals = [frob_error(e, r, relative) for e, r in zip(estimates, references)]
    return ErrorSeries(np.asarray(times), np.asarray(vals),
                       NormKind.RELATIVE if relative else NormKind.FROBENIUS)


def mse_over_runs(runs: Sequence[np.ndarray], reference: np.ndarray) -> tuple[float, float]:
    """Mean squared Frobenius error over runs and its standard error."""
    if len(runs) < 2:
        raise ValueError("need at least two runs")
    sq = np.array([np.sum((np.asarray(r) - reference) ** 2) for r in runs])
    return float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(len(sq)))


def _ols(x, y):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    n = len(x)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    icpt = float(ym - slope * xm)
    resid = y - (icpt + slope * x)
    if n > 2:
        s2 = float(np.sum(resid ** 2) / (n - 2))
        half = float(stats.t.ppf(0.975, n - 2) * np.sqrt(s2 / sxx))
    else:
        half = float("nan")
    return slope, icpt, half, resid


def fit_scaling(N, mse, stderr=None) -> ScalingReport:
    """OLS of log MSE on log N."""
    N = np.asarray(N, dtype=float)
    mse = np.asarray(mse, dtype=float)
    if len(np.unique(N)) < 3:
        raise ValueError("need at least three distinct N values")
    if np.any(mse <= 0) or np.any(N <= 0):
        raise ValueError("log-domain fit needs positive N and MSE")
    slope, icpt, half, _ = _ols(np.log(N), np.log(mse))
    se = tuple(float(s) for s in stderr) if stderr is not None else tuple(float("nan") for _ in N)
    return ScalingReport(tuple(N.tolist()), tuple(mse.tolist()), se, slope, icpt, half)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r_squared: float
    window: tuple  # (lo, hi) in time-to-go


def _widest_monotone(y: np.ndarray) -> tuple[int, int]:
    """Longest run [i, j) over which y is nonincreasing."""
    best, start = (0, 1), 0
    for k in range(1, len(y)):
        if y[k] > y[k - 1]:
            start = k
        if k + 1 - start > best[1] - best[0]:
            best = (start, k + 1)
    return best


def fit_decay_rate(time_to_go, errors, window=None, squared: bool = False,
                   min_points: int = 10) -> DecayFit:
    """Exponential decay rate of an error series as a function of T - t.

    The default window is the middle 60% of the time-to-go range. The rate is
    minus the log-slope, halved for squared errors. If the error is not
    monotone over the window, the widest monotone sub-window is used instead
    and a :class:`NonMonotoneWindowWarning` is issued.
    """
    s = np.asarray(time_to_go, dtype=float)
    e = np.asarray(errors, dtype=float)
    order = np.argsort(s)
    s, e = s[order], e[order]
    if window is None:
        lo, hi = s[0] + 0.2 * (s[-1] - s[0]), s[0] + 0.8 * (s[-1] - s[0])
    else:
        lo, hi = window
    sel = (s >= lo) & (s <= hi)
    s, e = s[sel], e[sel]
    if len(s) < min_points:
        raise ValueError(f"only {len(s)} points in the fit window (need {min_points})")
    if np.any(e <= 0):
        raise ValueError("errors must be positive for a log fit")
    if np.any(np.diff(e) > 0):
        i, j = _widest_monotone(e)
        warnings.warn(f"error series is not monotone on [{lo:g}, {hi:g}]; using [{s[i]:g}, {s[j - 1]:g}]",
                      NonMonotoneWindowWarning, stacklevel=2)
        s, e = s[i:j], e[i:j]
        if len(s) < 2:
            raise ValueError("no monotone sub-window with two or more points")
    y = np.log(e)
    slope, icpt, _, resid = _ols(s, y)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = float(1 - np.sum(resid ** 2) / ss) if ss > 0 else 1.0
    rate = -slope / 2 if squared else -slope
    return DecayFit(rate, icpt, r2, (float(s[0]), float(s[-1])))


def pre_plateau_window(time_to_go, errors, floor_fraction: float = 0.2, floor_factor: float = 3.0,
                       skip: float = 0.0) -> tuple[float, float]:
    """Window of time-to-go before an error series settles onto its noise floor.

    The floor is the median over the last ``floor_fraction`` of the range; the
    window ends where the error first drops below ``floor_factor`` times it.
    """
    s = np.asarray(time_to_go, dtype=float)
    e = np.asarray(errors, dtype=float)
    order = np.argsort(s)
    s, e = s[order], e[order]
    floor = float(np.median(e[s >= s[0] + (1 - floor_fraction) * (s[-1] - s[0])]))
    below = np.nonzero(e < floor_factor * floor)[0]
    end = s[below[0]] if below.size else s[-1]
    return float(s[0] + skip), float(end)


# --------------------------------------------------------------------------
# closed-loop analysis


def closed_loop_spectrum(problem: LqProblem, K) -> tuple[np.ndarray, bool]:
    """Eigenvalues of A + BK and whether all have negative real part."""
    Acl = problem.dynamics.A + problem.dynamics.B @ np.asarray(K, dtype=float)
    ev = np.linalg.eigvals(Acl)
    return ev, bool(np.all(ev.real < 0))


def solve_lyapunov(Acl: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """X with Acl^T X + X Acl + Q = 0, by the Kronecker-vectorized linear system."""
    d = Acl.shape[0]
    I = np.eye(d)
    # vec(Acl^T X) = (I kron Acl^T) vec X, vec(X Acl) = (Acl^T kron I) vec X (column-major)
    M = np.kron(I, Acl.T) + np.kron(Acl.T, I)
    x = np.linalg.solve(M, -Q.reshape(-1, order="F"))
    return sym(x.reshape(d, d, order="F"))


def average_cost_lyapunov(problem: LqProblem, K) -> float:
    """Long-run average LQG cost of u = Kx: 0.5 tr(X Sigma) with X the closed-loop Lyapunov solution."""
    if problem.kind is not CostKind.LQG:
        raise ValueError("the Lyapunov cost applies to LQG only")
    K = np.asarray(K, dtype=float)
    ev, ok = closed_loop_spectrum(problem, K)
    if not ok:
        raise StabilityError(ev)
    Acl = problem.dynamics.A + problem.dynamics.B @ K
    X = solve_lyapunov(Acl, problem.cost.Q + K.T @ problem.cost.R @ K)
    return float(0.5 * np.trace(X @ problem.dynamics.Sigma))


def monte_carlo_cost(problem: LqProblem, K, T: float, tau: float, runs: int, seed,
                     x0=None, burn_in: float = 0.0) -> tuple[float, float]:
    """Monte Carlo cost of u = Kx, with standard error.

    LQG returns the time-averaged running cost after ``burn_in``. LEQG returns
    (1/theta) log E exp(theta * (integrated cost + terminal)) divided by the
    horizon, evaluated in the log domain with a delta-method standard error.
    """
    from .control import GainSchedule, closed_loop_rollout

    d = problem.d
    x0 = np.zeros((runs, d)) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float), (runs, d))
    ro = closed_loop_rollout(problem, GainSchedule(np.asarray(K, dtype=float)), x0, T, tau, seed)
    if problem.kind is CostKind.LQG:
        kb = int(round(burn_in / tau))
        per_run = (ro.cost[-1] - ro.cost[kb]) / (T - kb * tau)
        return float(per_run.mean()), float(per_run.std(ddof=1) / np.sqrt(runs))
    th = problem.cost.theta
    total = th * (ro.cost[-1] + problem.cost.terminal(ro.states[-1]))
    mx = total.max()
    w = np.exp(total - mx)
    log_mean = mx + np.log(w.mean())
    value = log_mean / th / T
    se = float(w.std(ddof=1) / np.sqrt(runs) / w.mean() / abs(th) / T)
    return float(value), se


def relative_cost_and_gain(K_alg, problem: LqProblem, K_opt, times=None,
                           mc: Optional[dict] = None) -> CostReport:
    """Relative gain and cost errors of ``K_alg`` against the optimal ``K_opt``.

    For time-varying gains (stacks over ``times``) the gain error is the
    time average of the pointwise relative error. The cost error uses the
    Lyapunov cost of the stationary (t = 0) gains for LQG, and Monte Carlo
    (keyword arguments in ``mc``) for LEQG.
    """
    K_alg, K_opt = np.asarray(K_alg, dtype=float), np.asarray(K_opt, dtype=float)
    if K_alg.ndim == 3:
        rel = np.linalg.norm(K_alg - K_opt, axis=(-2, -1)) / np.linalg.norm(K_opt, axis=(-2, -1))
        t = np.asarray(times, dtype=float)
        eps_gain = float(trapezoid(rel, t) / (t[-1] - t[0]))
        Ka, Ko = K_alg[0], K_opt[0]
    else:
        eps_gain = frob_error(K_alg, K_opt, relative=True)
        Ka, Ko = K_alg, K_opt
    if problem.kind is CostKind.LQG and mc is None:
        c_alg = average_cost_lyapunov(problem, Ka)
        c_opt = average_cost_lyapunov(problem, Ko)
        method, se = "Lyapunov", None
    else:
        mc = dict(mc or {})
        c_alg, se = monte_carlo_cost(problem, Ka, **mc)
        c_opt, _ = monte_carlo_cost(problem, Ko, **mc)
        method = "MonteCarlo"
    eps_cost = (c_alg - c_opt) / c_opt if c_opt != 0 else float("nan")
    return CostReport(c_alg, method, eps_cost, eps_gain, se, {"cost_opt": c_opt})


# --------------------------------------------------------------------------
# serialization


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dump_json(obj: dict, path) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **obj}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
