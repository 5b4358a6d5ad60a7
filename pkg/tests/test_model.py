import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dual_enkf.model import (AssumptionError, CostKind, DimensionError, LqProblem, effective_matrices,
                             krylov_rank, require_valid, validate)
from dual_enkf.bench.generators import gen_random_canonical, gen_spring_mass_damper

from conftest import scalar


def test_scalar_problem_passes_all_checks():
    rep = validate(scalar())
    assert rep.passed
    assert all(c.passed for c in rep.checks)


def test_zero_input_matrix_is_uncontrollable():
    prob = LqProblem.from_matrices(np.eye(2), np.zeros((2, 1)), np.zeros((2, 1)), np.eye(2), [[1.0]], np.eye(2))
    rep = validate(prob)
    assert not rep.passed
    c = rep["controllability"]
    assert not c.passed and "rank 0" in c.detail


def test_risk_feasibility_fails_for_large_theta():
    rep = validate(scalar(sigma=1.0, kind="LEQG", theta=1.5))
    c = rep["risk_feasibility"]
    assert not c.passed
    assert c.margin == pytest.approx(-0.5)


def test_risk_feasibility_absent_for_lqg():
    with pytest.raises(KeyError):
        validate(scalar())["risk_feasibility"]


def test_indefinite_control_cost_names_clause():
    with pytest.raises(AssumptionError) as ei:
        require_valid(scalar(R=-1.0))
    assert "control_cost_pd" in str(ei.value)


def test_asymmetric_cost_rejected():
    prob = LqProblem.from_matrices(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2),
                                   [[1.0, 0.5], [0.0, 1.0]], np.eye(2))
    assert not validate(prob)["control_cost_pd"].passed


def test_dimension_mismatch_is_structural():
    with pytest.raises(DimensionError):
        LqProblem.from_matrices(np.eye(2), np.ones((3, 1)), np.zeros((2, 1)), np.eye(2), [[1.0]], np.eye(2))
    with pytest.raises(DimensionError):
        LqProblem.from_matrices(np.eye(2), np.ones((2, 1)), np.zeros((2, 1)), np.eye(2), np.eye(2), np.eye(2))


def test_theta_required_iff_leqg():
    with pytest.raises(ValueError):
        scalar(kind="LEQG")
    with pytest.raises(ValueError):
        scalar(theta=1.0)
    with pytest.raises(ValueError):
        scalar(kind="LEQG", theta=0.0)


def test_effective_matrices_examples():
    prob = LqProblem.from_matrices(np.eye(2), np.eye(2), np.zeros((2, 2)), np.eye(2), 2 * np.eye(2), np.eye(2))
    D, Sigma = effective_matrices(prob)
    np.testing.assert_allclose(D, 0.5 * np.eye(2))
    np.testing.assert_array_equal(Sigma, np.zeros((2, 2)))
    prob = LqProblem.from_matrices(np.eye(2), [[1.0], [0.0]], np.zeros((2, 1)), np.eye(2), [[1.0]], np.eye(2))
    D, _ = effective_matrices(prob)
    np.testing.assert_array_equal(D, [[1.0, 0.0], [0.0, 0.0]])


def test_matrices_are_read_only():
    prob = scalar()
    with pytest.raises(ValueError):
        prob.dynamics.A[0, 0] = 3.0


def test_cost_functions():
    prob = scalar(C=2.0, R=3.0, G=4.0)
    assert prob.cost.running(np.array([1.0]), np.array([1.0])) == pytest.approx(0.5 * 4 + 0.5 * 3)
    assert prob.cost.terminal(np.array([2.0])) == pytest.approx(8.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31))
def test_effective_matrices_symmetric(d, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((d, 2))
    M = rng.standard_normal((2, 2))
    prob = LqProblem.from_matrices(rng.standard_normal((d, d)), B, rng.standard_normal((d, 3)), np.eye(d),
                                   M @ M.T + np.eye(2), np.eye(d))
    D, Sigma = effective_matrices(prob)
    assert np.array_equal(D, D.T) and np.array_equal(Sigma, Sigma.T)
    assert np.linalg.eigvalsh(D).min() > -1e-12


def test_validate_is_pure():
    prob = gen_spring_mass_damper(3, 0.1, kind="LEQG", theta=1.1)
    assert validate(prob) == validate(prob)


def test_full_rank_leqg_feasible_implies_cholesky():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = 3
        prob = LqProblem.from_matrices(rng.standard_normal((d, d)), np.eye(d), 0.3 * rng.standard_normal((d, d)),
                                       np.eye(d), np.eye(d), np.eye(d), kind="LEQG", theta=float(rng.uniform(-2, 2)))
        if validate(prob).passed:
            D, Sigma = effective_matrices(prob)
            np.linalg.cholesky(D - prob.cost.theta * Sigma)


def test_krylov_rank_handles_large_chain():
    # powers of A span many decades here; the staircase keeps the rank exact
    for d_s in (20, 40):
        prob = gen_spring_mass_damper(d_s)
        assert krylov_rank(prob.dynamics.A, prob.dynamics.B)[0] == 2 * d_s
        assert validate(prob).passed


def test_companion_form_always_controllable():
    for seed in range(10):
        assert validate(gen_random_canonical(10, seed))["controllability"].passed


def test_partial_rank_detected():
    A = np.diag([1.0, 2.0, 3.0])
    B = np.array([[1.0], [1.0], [0.0]])
    assert krylov_rank(A, B)[0] == 2


def test_observability_is_warning_only():
    prob = LqProblem.from_matrices(np.diag([1.0, 2.0]), np.eye(2), np.zeros((2, 2)), [[1.0, 0.0], [0.0, 0.0]],
                                   np.eye(2), np.eye(2))
    rep = validate(prob)
    assert not rep["observability"].passed
    assert rep["observability"].severity == "warning"
    assert rep.failures() == [rep["state_cost_pd"]]


def test_with_cost_and_horizon():
    prob = scalar().with_cost("LEQG", 0.5).with_horizon(3.0)
    assert prob.kind is CostKind.LEQG and prob.T == 3.0 and prob.cost.abs_theta == 0.5
    assert prob.with_horizon(None).is_average
