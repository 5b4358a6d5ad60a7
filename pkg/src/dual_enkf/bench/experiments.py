"""Experiment orchestration: oracle solves, particle runs, metrics, output bundle."""
from __future__ import annotations

import hashlib
import json
import os
import platform
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..control import (DivergenceError, OnlineConfig, ProbePolicy, closed_loop_rollout, gain_from_p,
                       gain_schedule, probe_gain)
from ..enkf import EnkfConfig, SingularCovarianceError, Simulator, run_offline_batch
from ..metrics import (NonMonotoneWindowWarning, StabilityError, average_cost_lyapunov,
                       closed_loop_spectrum, dump_json, fit_decay_rate, fit_scaling,
                       pre_plateau_window, write_table)
from ..model import AssumptionError, CostKind
from ..riccati import ConvergenceError, IntegrationError, solve_are, solve_dre
from ..rng import Channel, CounterStream
from .config import ExperimentConfig, ExperimentKind

NUMERICAL_ERRORS = (SingularCovarianceError, IntegrationError, ConvergenceError, DivergenceError,
                    StabilityError, np.linalg.LinAlgError, FloatingPointError)
MEMORY_BUDGET = 2e8  # bytes of recorded P trajectories per seed batch


class ExperimentError(RuntimeError):
    pass


def run_seed(base: int, run: int, salt: int = 0) -> int:
    """Distinct 64-bit seed for run ``run`` of sub-experiment ``salt``."""
    return (int(base) << 32) | (int(salt) << 20) | int(run)


@dataclass
class ReportBundle:
    out_dir: Path
    config_echo: str
    summary: dict
    files: list = field(default_factory=list)  # numeric outputs, relative to out_dir
    timings: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures


class _Writer:
    """Single writer for all bundle files so the manifest stays consistent."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.root / name

    def manifest(self, extra: list) -> None:
        entries = []
        for name in self.files:
            data = (self.root / name).read_bytes()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        dump_json({"files": entries, "non_numeric": extra}, self.root / "manifest.json")


class _Timer:
    def __init__(self):
        self.phases = {"oracle": 0.0, "ensemble": 0.0, "metrics": 0.0}

    @contextmanager
    def __call__(self, phase):
        t0 = time.monotonic()
        try:
            yield
        finally:
            self.phases[phase] += time.monotonic() - t0


def _batches(seeds, size):
    for a in range(0, len(seeds), size):
        yield seeds[a:a + size]


def _seed_batch(cfg: ExperimentConfig, d: int) -> int:
    K1 = int(round(cfg.T / cfg.tau)) + 1
    cap = max(1, int(MEMORY_BUDGET // (K1 * d * d * 8)))
    return min(cfg.seed_batch, cap)


def _enkf_config(cfg: ExperimentConfig, N: int, record=("mean", "cov", "prec")) -> EnkfConfig:
    return EnkfConfig(N=N, T=cfg.T, tau=cfg.tau, jitter=cfg.jitter, chunk_size=cfg.chunk_size,
                      workers=cfg.threads, record=record)


def _reference_step(tau: float, target: float = 1e-3) -> float:
    return tau / max(1, int(round(tau / target)))


# --------------------------------------------------------------------------
# experiment kinds


def _convergence(cfg, w, timer, summary, failures):
    for vi, var in enumerate(cfg.variants):
        prob = cfg.problem.build(var)
        with timer("oracle"):
            dre = solve_dre(prob, cfg.T, _reference_step(cfg.tau)).on_grid(cfg.tau)
            are = solve_are(prob)
        with timer("ensemble"):
            try:
                out = run_offline_batch(prob, _enkf_config(cfg, cfg.N), [run_seed(cfg.seed, 0, vi)])[0]
            except NUMERICAL_ERRORS as exc:
                failures.append({"variant": str(var), "error": repr(exc)})
                continue
        with timer("metrics"):
            Pbar = are.P_bar
            d = prob.d
            rows = []
            for k, t in enumerate(out.times):
                for i in range(d):
                    for j in range(d):
                        rows.append((float(t), i, j, float(out.prec[k, i, j]), float(dre.values[k, i, j]),
                                     float(Pbar[i, j])))
            write_table(w.path(f"convergence_{var.tag}.csv"), ["t", "i", "j", "enkf", "dre", "are"], rows)
            summary[var.tag] = convergence_summary(prob, out, dre.values, Pbar)


def convergence_summary(prob, out, dre_values, Pbar) -> dict:
    """Distance-to-stationarity metrics for one run against the DRE and ARE solutions."""
    s = out.times[-1] - out.times
    e_enkf = np.linalg.norm(out.prec - Pbar, axis=(1, 2))
    e_dre = np.linalg.norm(dre_values - Pbar, axis=(1, 2))
    res = {"rel_error_P0": float(e_enkf[0] / np.linalg.norm(Pbar)),
           "rel_error_P0_dre": float(e_dre[0] / np.linalg.norm(Pbar))}
    window = decay_window(s, e_enkf)
    res["window"] = list(window)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonMonotoneWindowWarning)
        try:
            fe = fit_decay_rate(s, e_enkf, window=window)
            fd = fit_decay_rate(s, e_dre, window=window)
            res.update(rate_enkf=fe.rate, rate_dre=fd.rate, r2_enkf=fe.r_squared, r2_dre=fd.r_squared)
        except ValueError as exc:
            res["rate_error"] = str(exc)
    K_alg = gain_from_p(out.P_bar, prob)
    K_opt = gain_from_p(Pbar, prob)
    res["eps_gain"] = float(np.linalg.norm(K_alg - K_opt) / np.linalg.norm(K_opt))
    ev, hurwitz = closed_loop_spectrum(prob, K_alg)
    res["closed_loop_hurwitz"] = hurwitz
    if prob.kind is CostKind.LQG and hurwitz and np.any(prob.dynamics.Sigma):
        c_alg = average_cost_lyapunov(prob, K_alg)
        c_opt = average_cost_lyapunov(prob, K_opt)
        res["eps_cost"] = (c_alg - c_opt) / c_opt
    return res


def decay_window(time_to_go, errors) -> tuple:
    """Middle 60% of the range, cut off where the particle error reaches its floor."""
    s = np.asarray(time_to_go)
    lo = s.min() + 0.2 * np.ptp(s)
    hi = s.min() + 0.8 * np.ptp(s)
    _, plateau = pre_plateau_window(s, errors)
    return float(lo), float(min(hi, max(plateau, lo)))


def _scaling(cfg, w, timer, summary, failures):
    for vi, var in enumerate(cfg.variants):
        prob = cfg.problem.build(var)
        with timer("oracle"):
            are = solve_are(prob)
            Pbar, Sbar = are.P_bar, are.S_bar(prob)
        nS, nP = np.linalg.norm(Sbar) ** 2, np.linalg.norm(Pbar) ** 2
        stats_S, stats_P = [], []
        for ni, N in enumerate(cfg.N_list):
            seeds = [run_seed(cfg.seed, r, 64 * vi + ni) for r in range(cfg.runs)]
            rows = []
            for batch in _batches(seeds, _seed_batch(cfg, prob.d)):
                with timer("ensemble"):
                    try:
                        outs = run_offline_batch(prob, _enkf_config(cfg, N, ("cov", "prec")), batch)
                    except NUMERICAL_ERRORS as exc:
                        failures.append({"variant": str(var), "N": N, "seeds": [batch[0], batch[-1]],
                                         "error": repr(exc)})
                        continue
                for o in outs:
                    eS = float(np.sum((o.S_bar - Sbar) ** 2))
                    eP = float(np.sum((o.P_bar - Pbar) ** 2))
                    rows.append((seeds.index(o.seed), o.seed, eS, eP, eS / nS, eP / nP))
            with timer("metrics"):
                write_table(w.path(f"scaling_{var.tag}_N{N}.csv"),
                            ["run", "seed", "sq_err_S", "sq_err_P", "rel_sq_err_S", "rel_sq_err_P"], rows)
                if len(rows) >= 2:
                    a = np.array([r[4:] for r in rows])
                    m, se = a.mean(0), a.std(0, ddof=1) / np.sqrt(len(a))
                    stats_S.append((N, m[0], se[0]))
                    stats_P.append((N, m[1], se[1]))
        entry = {}
        for name, st in (("S", stats_S), ("P", stats_P)):
            if len(st) >= 3:
                rep = fit_scaling([x[0] for x in st], [x[1] for x in st], [x[2] for x in st])
                entry[name] = rep.to_dict()
        summary[var.tag] = entry


def _unstable_systems(cfg, count):
    """Generator seeds (from the configured one upward) whose open loop is unstable."""
    start = int(cfg.problem.params.get("seed", 0))
    found = []
    s = start
    while len(found) < count:
        if s - start > 100 * count:
            raise ExperimentError("could not find enough open-loop unstable systems")
        prob = cfg.problem.build(cfg.variants[0], seed=s)
        if np.any(np.linalg.eigvals(prob.dynamics.A).real > 0):
            found.append(s)
        s += 1
    return found


def _stabilization(cfg, w, timer, summary, failures):
    if cfg.problem.generator != "random_canonical":
        raise ExperimentError("Stabilization runs over random_canonical systems")
    systems = _unstable_systems(cfg, cfg.runs)
    for vi, var in enumerate(cfg.variants):
        rows, hurwitz = [], 0
        for r, sys_seed in enumerate(systems):
            prob = cfg.problem.build(var, seed=sys_seed)
            with timer("ensemble"):
                try:
                    out = run_offline_batch(prob, _enkf_config(cfg, cfg.N, ("prec",)),
                                            [run_seed(cfg.seed, r, vi)])[0]
                except NUMERICAL_ERRORS as exc:
                    failures.append({"variant": str(var), "system_seed": sys_seed, "error": repr(exc)})
                    continue
            with timer("metrics"):
                ev_cl, ok = closed_loop_spectrum(prob, gain_from_p(out.P_bar, prob))
                ev_ol = np.linalg.eigvals(prob.dynamics.A)
                hurwitz += ok
                for which, ev in (("open", ev_ol), ("closed", ev_cl)):
                    for z in sorted(ev, key=lambda z: (z.real, z.imag)):
                        rows.append((sys_seed, which, float(z.real), float(z.imag)))
        write_table(w.path(f"poles_{var.tag}.csv"), ["system_seed", "loop", "re", "im"], rows)
        summary[var.tag] = {"systems": len(systems), "hurwitz": int(hurwitz),
                            "system_seeds": systems}


def _energy(cfg, w, timer, summary, failures):
    K = int(round(cfg.T / cfg.tau))
    for vi, var in enumerate(cfg.variants):
        prob = cfg.problem.build(var)
        seeds = [run_seed(cfg.seed, r, vi) for r in range(cfg.runs)]
        energy = []
        for batch in _batches(seeds, _seed_batch(cfg, prob.d)):
            with timer("ensemble"):
                try:
                    outs = run_offline_batch(prob, _enkf_config(cfg, cfg.N, ("prec",)), batch)
                except NUMERICAL_ERRORS as exc:
                    failures.append({"variant": str(var), "seeds": [batch[0], batch[-1]], "error": repr(exc)})
                    continue
            with timer("metrics"):
                for o in outs:
                    x0 = CounterStream(o.seed).normals(Channel.INITIAL, 0, prob.d, n=1)
                    if cfg.mode == "probe":
                        policy = ProbePolicy.from_output(o, prob, cfg.online, o.seed)
                    else:
                        policy = gain_schedule(o, prob)
                    try:
                        ro = closed_loop_rollout(prob, policy, x0, cfg.T, cfg.tau, o.seed)
                    except DivergenceError as exc:
                        failures.append({"variant": str(var), "seed": o.seed, "error": repr(exc)})
                        continue
                    energy.append(ro.energy[:, 0])
        if not energy:
            continue
        E = np.array(energy)
        mean = E.mean(0)
        se = E.std(0, ddof=1) / np.sqrt(len(E)) if len(E) > 1 else np.zeros(K + 1)
        times = np.linspace(0.0, cfg.T, K + 1)
        write_table(w.path(f"energy_{var.tag}.csv"), ["t", "mean_energy", "stderr"],
                    [(float(t), float(m), float(s)) for t, m, s in zip(times, mean, se)])
        summary[var.tag] = {"runs": len(E), "initial_energy": float(mean[0]),
                            "terminal_energy": float(mean[-1]), "ratio": float(mean[-1] / mean[0])}


def _gain_probe(cfg, w, timer, summary, failures):
    var = cfg.variants[0]
    prob = cfg.problem.build(var)
    with timer("oracle"):
        Kbar = gain_from_p(solve_are(prob).P_bar, prob)
    out = {}
    for ni, N in enumerate(cfg.N_list):
        seeds = [run_seed(cfg.seed, r, ni) for r in range(cfg.runs)]
        errs = {Ne: [] for Ne in cfg.N_e_list}
        direct = []
        for batch in _batches(seeds, _seed_batch(cfg, prob.d)):
            with timer("ensemble"):
                try:
                    outs = run_offline_batch(prob, _enkf_config(cfg, N, ("prec",)), batch)
                except NUMERICAL_ERRORS as exc:
                    failures.append({"N": N, "seeds": [batch[0], batch[-1]], "error": repr(exc)})
                    continue
            with timer("metrics"):
                for o in outs:
                    direct.append(float(np.sum((gain_from_p(o.P_bar, prob) - Kbar) ** 2)))
                    for ei, Ne in enumerate(cfg.N_e_list):
                        sim = Simulator(prob.dynamics, o.seed, Channel.PROBE, sub=ei)
                        Kh = probe_gain(o.P_bar, OnlineConfig(Ne, cfg.online.tau), sim, prob)
                        errs[Ne].append(float(np.sum((Kh - Kbar) ** 2)))
        rows = []
        for Ne in cfg.N_e_list:
            a = np.array(errs[Ne])
            rows.append((Ne, float(a.mean()), float(a.std(ddof=1) / np.sqrt(len(a)))))
        a = np.array(direct)
        floor = (float(a.mean()), float(a.std(ddof=1) / np.sqrt(len(a))))
        write_table(w.path(f"gain_probe_N{N}.csv"), ["N_e", "mse", "stderr"], rows)
        entry = {"floor_mse": floor[0], "floor_stderr": floor[1], "runs": len(direct)}
        entry.update(probe_slope(rows, floor[0]))
        out[str(N)] = entry
    summary["by_N"] = out


def probe_slope(rows, floor: float, factor: float = 5.0) -> dict:
    """Log-log slope of gain MSE against N_e, over points still well above the floor."""
    pts = [(ne, m) for ne, m, _ in rows if m > factor * floor]
    if len(pts) < 3:
        return {"slope": None, "slope_points": len(pts)}
    rep = fit_scaling([p[0] for p in pts], [p[1] for p in pts])
    return {"slope": rep.slope, "slope_halfwidth": rep.slope_halfwidth, "slope_points": len(pts)}


_RUNNERS = {
    ExperimentKind.CONVERGENCE: _convergence,
    ExperimentKind.SCALING: _scaling,
    ExperimentKind.STABILIZATION: _stabilization,
    ExperimentKind.ENERGY: _energy,
    ExperimentKind.GAIN_PROBE: _gain_probe,
}


def run_experiment(cfg: ExperimentConfig) -> ReportBundle:
    """Run one experiment and write its bundle into ``cfg.out_dir``.

    Numeric files (CSV tables, ``summary.json``, the config echo, the
    manifest) depend only on the config and seed. Timings and host details go
    to ``provenance.json``, which the manifest lists without a checksum.
    """
    if cfg.T is None:
        raise ExperimentError("the particle method needs a finite simulation horizon T")
    root = Path(cfg.out_dir)
    w = _Writer(root)
    timer = _Timer()
    summary, failures = {}, []
    try:
        _RUNNERS[cfg.kind](cfg, w, timer, summary, failures)
    except (AssumptionError, *NUMERICAL_ERRORS) as exc:
        failures.append({"stage": cfg.kind.value, "error": repr(exc)})
    echo = cfg.echo()
    w.path("config.ini").write_text(echo)
    dump_json({"kind": cfg.kind.value, "seed": cfg.seed, "results": summary,
               "complete": not failures, "failures": failures}, w.path("summary.json"))
    prov = {"version": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "seed": cfg.seed, "threads": cfg.threads, "timings_s": timer.phases,
            "pid": os.getpid()}
    dump_json(prov, root / "provenance.json")
    w.manifest(["provenance.json"])
    return ReportBundle(root, echo, summary, list(w.files), timer.phases, prov, failures)


def load_summary(out_dir) -> dict:
    with open(Path(out_dir) / "summary.json") as fh:
        return json.load(fh)
