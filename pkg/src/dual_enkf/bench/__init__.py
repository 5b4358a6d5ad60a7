"""Benchmark generators, experiment configs and the command-line entry point."""

from .generators import gen_random_canonical, gen_spring_mass_damper, toeplitz_chain
from .config import ConfigError, ExperimentConfig, ExperimentKind, Variant, load_config, parse_config
from .experiments import ReportBundle, run_experiment
