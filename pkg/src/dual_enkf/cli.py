"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .bench.config import ConfigError, load_config
from .bench.experiments import NUMERICAL_ERRORS, ExperimentError, run_experiment
from .control import OnlineConfig, ProbePolicy, closed_loop_rollout, gain_schedule
from .enkf import EnkfConfig, run_offline
from .metrics import dump_json, write_table
from .model import AssumptionError, DimensionError, validate
from .riccati import solve_are, solve_dre, solve_dual_dre
from .rng import Channel, CounterStream

THREADS_ENV = "DUAL_ENKF_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("config", help="experiment config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", help="output directory (default: config out_dir)")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    p = _Parser(prog="dual-enkf", description="Dual ensemble Kalman filter for LQ control.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("validate", parents=[common], help="check the standing assumptions")
    sub.add_parser("riccati", parents=[common], help="solve the Riccati equations (oracle only)")
    sub.add_parser("enkf", parents=[common], help="one particle run")
    sub.add_parser("experiment", parents=[common], help="full experiment bundle")
    sub.add_parser("rollout", parents=[common], help="closed-loop simulation under the learned control")
    return p


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={env!r} is not an integer") from None
    if n < 1:
        raise UsageError("thread count must be positive")
    return n


def _cmd_validate(cfg, args) -> int:
    ok = True
    for var in cfg.variants:
        rep = validate(cfg.problem.build(var))
        print(f"# {var}")
        print(rep.summary())
        if not rep.passed:
            ok = False
            print("failing clauses: " + ", ".join(c.name for c in rep.failures()), file=sys.stderr)
    return 0 if ok else 1


def _matrix_rows(times, values):
    d = values.shape[-1]
    for t, M in zip(times, values):
        for i in range(d):
            for j in range(d):
                yield (float(t), i, j, float(M[i, j]))


def _cmd_riccati(cfg, args, out: Path) -> int:
    results = {}
    for var in cfg.variants:
        prob = cfg.problem.build(var)
        are = solve_are(prob)
        res = {"P_bar": are.P_bar, "S_bar": are.S_bar(prob), "residual": are.residual}
        if prob.T is not None:
            res["primal"] = solve_dre(prob, prob.T, cfg.tau / max(1, round(cfg.tau / 1e-3))).on_grid(cfg.tau)
            res["dual"] = solve_dual_dre(prob, prob.T, cfg.tau / max(1, round(cfg.tau / 1e-3))).on_grid(cfg.tau)
        results[var.tag] = res
        if args.format == "csv":
            write_table(out / f"are_{var.tag}.csv", ["i", "j", "P_bar", "S_bar"],
                        [(i, j, float(res["P_bar"][i, j]), float(res["S_bar"][i, j]))
                         for i in range(prob.d) for j in range(prob.d)])
            for name in ("primal", "dual"):
                if name in res:
                    tr = res[name]
                    write_table(out / f"riccati_{name}_{var.tag}.csv", ["t", "i", "j", "value"],
                                _matrix_rows(tr.times, tr.values))
    if args.format == "json":
        payload = {}
        for tag, res in results.items():
            payload[tag] = {"P_bar": res["P_bar"], "S_bar": res["S_bar"], "residual": res["residual"]}
            for name in ("primal", "dual"):
                if name in res:
                    payload[tag][name] = {"times": res[name].times, "values": res[name].values}
        dump_json(payload, out / "riccati.json")
    return 0


def _enkf_for(cfg, var, seed, threads):
    prob = cfg.problem.build(var)
    if prob.T is None:
        raise ConfigError("the particle method needs a finite horizon T", field_name="problem.T")
    econf = EnkfConfig(N=cfg.N, T=prob.T, tau=cfg.tau, seed=seed, jitter=cfg.jitter,
                       chunk_size=cfg.chunk_size, workers=threads)
    return prob, run_offline(prob, econf)


def _cmd_enkf(cfg, args, out: Path, threads: int) -> int:
    for var in cfg.variants:
        _, res = _enkf_for(cfg, var, cfg.seed, threads)
        if args.format == "csv":
            res.to_csv(out / f"enkf_{var.tag}.csv")
        else:
            dump_json({"seed": res.seed, "tau": res.tau, "times": res.times, "mean": res.mean,
                       "S": res.cov, "P": res.prec}, out / f"enkf_{var.tag}.json")
    return 0


def _cmd_rollout(cfg, args, out: Path, threads: int) -> int:
    for var in cfg.variants:
        prob, res = _enkf_for(cfg, var, cfg.seed, threads)
        if cfg.mode == "probe":
            policy = ProbePolicy.from_output(res, prob, OnlineConfig(cfg.online.N_e, cfg.tau), cfg.seed)
        else:
            policy = gain_schedule(res, prob)
        x0 = CounterStream(cfg.seed).normals(Channel.INITIAL, 0, prob.d, n=1)
        ro = closed_loop_rollout(prob, policy, x0, prob.T, cfg.tau, cfg.seed)
        if args.format == "csv":
            ro.to_csv(out / f"rollout_{var.tag}.csv")
        else:
            dump_json({"times": ro.times, "states": ro.states[:, 0], "controls": ro.controls[:, 0],
                       "cost": ro.cost[:, 0], "energy": ro.energy[:, 0]}, out / f"rollout_{var.tag}.json")
    return 0


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args)
        cfg = load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out_dir, threads=threads)
        if args.command == "validate":
            return _cmd_validate(cfg, args)
        if args.command == "experiment":
            bundle = run_experiment(cfg)
            for f in bundle.failures:
                print(f"failure: {f}", file=sys.stderr)
            print(f"wrote {len(bundle.files)} files to {bundle.out_dir}")
            return 0 if bundle.complete else 2
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "riccati":
            return _cmd_riccati(cfg, args, out)
        if args.command == "enkf":
            return _cmd_enkf(cfg, args, out, threads)
        return _cmd_rollout(cfg, args, out, threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, AssumptionError, DimensionError, ExperimentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, AssumptionError):
            print(exc.report.summary(), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    np.seterr(over="ignore")
    sys.exit(cli_main())
