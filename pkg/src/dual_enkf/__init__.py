"""Particle-based learning of linear-quadratic optimal controllers.

A backward-in-time interacting particle system (a dual ensemble Kalman
filter) driven only by simulator calls approximates the solution of the
Riccati equation; optimal feedback is then read off the particle covariance
or extracted from simulator probes.
"""

__version__ = "0.1.0"

from .model import (AssumptionError, CostKind, CostModel, DimensionError, LinearDynamics, LqProblem,
                    ValidationReport, require_valid, validate)
from .riccati import (AreSolution, ConvergenceError, IntegrationError, RiccatiTrajectory, dual_ricc_op,
                      p_to_s, ricc_op, s_to_p, solve_are, solve_dre, solve_dual_dre)
from .enkf import (EnkfConfig, EnkfOutput, Ensemble, SingularCovarianceError, Simulator,
                   empirical_moments, exploration_covariance, mean_field_term, run_offline,
                   run_offline_batch, sample_terminal, simulator_step)
from .control import (DivergenceError, GainSchedule, OnlineConfig, ProbePolicy, closed_loop_rollout,
                      empirical_q, gain_from_p, gain_schedule, probe_control, probe_gain)
from .metrics import (StabilityError, UndefinedBaselineError, average_cost_lyapunov, closed_loop_spectrum,
                      fit_decay_rate, fit_scaling, frob_error, monte_carlo_cost, mse_over_runs,
                      relative_cost_and_gain, solve_lyapunov)

__all__ = [name for name in dir() if not name.startswith("_")]
