"""Experiment configuration files.

INI-style ``key = value`` sections. Matrices and lists are written as JSON
bracket lists. Recognised sections: ``[experiment]``, ``[problem]``,
``[enkf]`` and ``[online]``.
"""
from __future__ import annotations

import configparser
import enum
import json
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..control import OnlineConfig
from ..model import LqProblem
from .generators import gen_random_canonical, gen_spring_mass_damper

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed configuration; carries the offending line and field when known."""

    def __init__(self, msg: str, line: Optional[int] = None, field_name: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_name is not None:
            where.append(f"field '{field_name}'")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.line = line
        self.field = field_name


class ExperimentKind(str, enum.Enum):
    CONVERGENCE = "ConvergencePlot"
    SCALING = "ScalingSweep"
    STABILIZATION = "Stabilization"
    ENERGY = "ClosedLoopEnergy"
    GAIN_PROBE = "GainProbe"


@dataclass(frozen=True)
class Variant:
    """One cost variant, written ``LQG`` or ``LEQG:<theta>``."""

    kind: str = "LQG"
    theta: Optional[float] = None

    @classmethod
    def parse(cls, text: str) -> "Variant":
        text = str(text).strip()
        if text.upper() == "LQG":
            return cls()
        m = re.fullmatch(r"LEQG\s*:\s*(\S+)", text, flags=re.I)
        if not m:
            raise ValueError(f"cannot parse cost variant {text!r}")
        return cls("LEQG", float(m.group(1)))

    @property
    def tag(self) -> str:
        return "LQG" if self.kind == "LQG" else f"LEQG_{self.theta:g}"

    def __str__(self):
        return "LQG" if self.kind == "LQG" else f"LEQG:{self.theta:g}"


@dataclass(frozen=True)
class ProblemSpec:
    generator: str  # "spring_mass_damper", "random_canonical" or "inline"
    params: dict
    T: Optional[float]

    def build(self, variant: Variant = Variant(), seed: Optional[int] = None) -> LqProblem:
        p = dict(self.params)
        if self.generator == "spring_mass_damper":
            return gen_spring_mass_damper(int(p.get("d_s", 2)), float(p.get("sigma_scale", 0.1)),
                                          bool(p.get("flip_stability", False)),
                                          variant.kind, variant.theta, self.T)
        if self.generator == "random_canonical":
            s = int(p.get("seed", 0)) if seed is None else int(seed)
            return gen_random_canonical(int(p.get("d", 10)), s, float(p.get("sigma_scale", 0.1)),
                                        variant.kind, variant.theta, self.T)
        return LqProblem.from_matrices(p["A"], p["B"], p["sigma"], p["C"], p["R"], p["G"],
                                       kind=variant.kind, theta=variant.theta, T=self.T)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: ExperimentKind
    problem: ProblemSpec
    variants: tuple = (Variant(),)
    N: int = 500
    tau: float = 0.02
    jitter: float = 0.0
    chunk_size: int = 256
    seed_batch: int = 25
    online: OnlineConfig = field(default_factory=OnlineConfig)
    runs: int = 1
    N_list: tuple = ()
    N_e_list: tuple = ()
    seed: int = 0
    out_dir: str = "out"
    mode: str = "gain"  # closed-loop control: "gain" (B known) or "probe"
    threads: int = 1
    text: str = ""

    @property
    def T(self) -> Optional[float]:
        return self.problem.T

    def with_overrides(self, seed=None, out_dir=None, threads=None) -> "ExperimentConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if out_dir is not None:
            kw["out_dir"] = str(out_dir)
        if threads is not None:
            kw["threads"] = int(threads)
        return replace(self, **kw)

    def echo(self) -> str:
        """Canonical config text that reproduces this experiment."""
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {
            "schema_version": str(CONFIG_SCHEMA_VERSION),
            "kind": self.kind.value,
            "seed": str(self.seed),
            "runs": str(self.runs),
            "variants": ", ".join(str(v) for v in self.variants),
            "N_list": json.dumps(list(self.N_list)),
            "N_e_list": json.dumps(list(self.N_e_list)),
            "mode": self.mode,
            "seed_batch": str(self.seed_batch),
        }
        prob = {"generator": self.problem.generator,
                "T": "none" if self.T is None else repr(self.T)}
        for k, v in self.problem.params.items():
            prob[k] = json.dumps(np.asarray(v).tolist() if isinstance(v, np.ndarray) else v)
        cp["problem"] = prob
        cp["enkf"] = {"N": str(self.N), "tau": repr(self.tau), "jitter": repr(self.jitter),
                      "chunk_size": str(self.chunk_size)}
        cp["online"] = {"N_e": str(self.online.N_e), "tau": repr(self.online.tau)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# parsing

_REQUIRED = {
    ExperimentKind.CONVERGENCE: (),
    ExperimentKind.SCALING: ("N_list", "runs"),
    ExperimentKind.STABILIZATION: ("runs",),
    ExperimentKind.ENERGY: ("runs",),
    ExperimentKind.GAIN_PROBE: ("N_list", "N_e_list", "runs"),
}
_MATRICES = ("A", "B", "sigma", "C", "R", "G")


def _line_of(text: str, section: str, key: Optional[str]) -> Optional[int]:
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        if cur == section and key is not None:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            if k.lower() == key.lower():
                return i
    return None


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, text: str):
        self.cp = cp
        self.text = text

    def err(self, section, key, msg):
        return ConfigError(msg, _line_of(self.text, section, key), f"{section}.{key}" if key else section)

    def has(self, section, key):
        return self.cp.has_option(section, key) and self.cp.get(section, key).strip() != ""

    def raw(self, section, key, default=None, required=False):
        if not self.has(section, key):
            if required:
                raise self.err(section, None, f"missing required field '{key}'")
            return default
        return self.cp.get(section, key).strip()

    def typed(self, section, key, conv, default=None, required=False):
        v = self.raw(section, key, None, required)
        if v is None:
            return default
        try:
            return conv(v)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise self.err(section, key, f"invalid value {v!r} ({exc})") from None


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _int_list(v: str) -> tuple:
    vals = json.loads(v)
    if not isinstance(vals, list) or not all(isinstance(x, int) and x > 0 for x in vals):
        raise ValueError("expected a list of positive integers")
    return tuple(vals)


def _matrix(v: str) -> np.ndarray:
    arr = np.array(json.loads(v), dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError("expected a nested bracket list (2-d matrix)")
    return arr


def _horizon(v: str) -> Optional[float]:
    if v.strip().lower() in ("none", "inf", "average"):
        return None
    T = float(v)
    if not T > 0:
        raise ValueError("horizon must be positive")
    return T


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (N vs n)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    r = _Reader(cp, text)
    for sec in ("experiment", "problem"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")

    ver = r.typed("experiment", "schema_version", int, CONFIG_SCHEMA_VERSION)
    if ver != CONFIG_SCHEMA_VERSION:
        raise r.err("experiment", "schema_version", f"unsupported schema version {ver}")
    kind_txt = r.raw("experiment", "kind", required=True)
    try:
        kind = ExperimentKind(kind_txt)
    except ValueError:
        raise r.err("experiment", "kind",
                    f"unknown kind {kind_txt!r}; expected one of {[k.value for k in ExperimentKind]}") from None

    gen = r.raw("problem", "generator", "inline")
    params: dict = {}
    if gen == "spring_mass_damper":
        params["d_s"] = r.typed("problem", "d_s", int, 2)
        params["sigma_scale"] = r.typed("problem", "sigma_scale", float, 0.1)
        params["flip_stability"] = r.typed("problem", "flip_stability", _bool, False)
        if params["d_s"] < 1:
            raise r.err("problem", "d_s", "d_s must be >= 1")
    elif gen == "random_canonical":
        params["d"] = r.typed("problem", "d", int, 10)
        params["seed"] = r.typed("problem", "seed", int, 0)
        params["sigma_scale"] = r.typed("problem", "sigma_scale", float, 0.1)
        if params["d"] < 1:
            raise r.err("problem", "d", "d must be >= 1")
    elif gen == "inline":
        for name in _MATRICES:
            params[name] = r.typed("problem", name, _matrix, required=True)
    else:
        raise r.err("problem", "generator", f"unknown generator {gen!r}")
    T = r.typed("problem", "T", _horizon, 10.0)
    spec = ProblemSpec(gen, params, T)

    variants_txt = r.raw("experiment", "variants")
    if variants_txt is None:
        cost = r.raw("problem", "cost", "LQG")
        theta = r.raw("problem", "theta")
        variants_txt = cost if theta is None else f"{cost}:{theta}"
    try:
        variants = tuple(Variant.parse(v) for v in variants_txt.split(",") if v.strip())
    except ValueError as exc:
        key = "variants" if r.has("experiment", "variants") else "cost"
        sec = "experiment" if key == "variants" else "problem"
        raise r.err(sec, key, str(exc)) from None

    N = r.typed("enkf", "N", int, 500)
    tau = r.typed("enkf", "tau", float, 0.02)
    N_e = r.typed("online", "N_e", int, 1)
    tau_on = r.typed("online", "tau", float, tau)
    try:
        online = OnlineConfig(N_e, tau_on)
    except ValueError as exc:
        raise r.err("online", "N_e", str(exc)) from None

    cfg = ExperimentConfig(
        kind=kind,
        problem=spec,
        variants=variants,
        N=N,
        tau=tau,
        jitter=r.typed("enkf", "jitter", float, 0.0),
        chunk_size=r.typed("enkf", "chunk_size", int, 256),
        seed_batch=r.typed("experiment", "seed_batch", int, 25),
        online=online,
        runs=r.typed("experiment", "runs", int, 1),
        N_list=r.typed("experiment", "N_list", _int_list, ()),
        N_e_list=r.typed("experiment", "N_e_list", _int_list, ()),
        seed=r.typed("experiment", "seed", int, 0),
        out_dir=r.raw("experiment", "out_dir", "out"),
        mode=r.raw("experiment", "mode", "gain"),
        text=text,
    )
    for key in _REQUIRED[kind]:
        if not r.has("experiment", key):
            raise r.err("experiment", None, f"kind {kind.value} requires field '{key}'")
    if cfg.mode not in ("gain", "probe"):
        raise r.err("experiment", "mode", "mode must be 'gain' or 'probe'")
    if N < 2:
        raise r.err("enkf", "N", "N must be at least 2")
    if cfg.runs < 1:
        raise r.err("experiment", "runs", "runs must be positive")
    if cfg.chunk_size < 1 or cfg.seed_batch < 1:
        raise r.err("enkf", "chunk_size", "chunk sizes must be positive")
    if kind is ExperimentKind.SCALING and len(set(cfg.N_list)) < 3:
        raise r.err("experiment", "N_list", "a scaling sweep needs at least three N values")
    if kind in (ExperimentKind.SCALING, ExperimentKind.GAIN_PROBE) and cfg.runs < 2:
        raise r.err("experiment", "runs", "at least two runs are needed for an MSE")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())
