import numpy as np
import pytest

from dual_enkf.bench.generators import gen_random_canonical, gen_spring_mass_damper
from dual_enkf.enkf import (DegenerateEnsembleError, EnkfConfig, EnkfOutput, Ensemble, Simulator,
                            empirical_moments, exploration_covariance, mean_field_term,
                            run_offline, run_offline_batch, sample_terminal, simulator_step)
from dual_enkf.metrics import fit_scaling
from dual_enkf.riccati import solve_dual_dre, terminal_dual
from dual_enkf.rng import Channel, CounterStream

from conftest import scalar


def euler_covariance(problem, T, tau):
    """Covariance of the particle recursion in the N -> infinity limit, iterated directly.

    With the mean at zero each particle obeys Y <- F Y - B d_eta - sigma dW where
    F = I - tau (A + wI S C'C + wC Sigma S^-1).
    """
    A, B = problem.dynamics.A, problem.dynamics.B
    Sig, C = problem.dynamics.Sigma, problem.cost.C
    R = problem.cost.R
    if problem.kind.value == "LQG":
        wI, wC, cov_eta = 0.5, 0.5, np.linalg.inv(R)
    else:
        th = problem.cost.theta
        wI, wC, cov_eta = abs(th) / 2, (1.0 if th > 0 else 0.0), np.linalg.inv(abs(th) * R)
    S = np.linalg.inv(abs(problem.cost.theta or 1.0) * problem.cost.G)
    out = [S]
    for _ in range(int(round(T / tau))):
        M = A + wI * S @ C.T @ C + (wC * Sig @ np.linalg.inv(S) if wC else 0)
        F = np.eye(len(A)) - tau * M
        S = F @ S @ F.T + tau * (B @ cov_eta @ B.T + Sig)
        S = 0.5 * (S + S.T)
        out.append(S)
    return np.array(out[::-1])


# ---------------------------------------------------------------- building blocks

def test_sample_terminal_identity():
    ens = sample_terminal(100_000, np.eye(3), 0)
    _, S, _ = empirical_moments(ens, np.eye(3))
    assert np.linalg.norm(S - np.eye(3)) < 0.02


def test_sample_terminal_diag():
    ens = sample_terminal(20_000, np.diag([4.0, 1.0]), 5)
    v = ens.particles.var(axis=0, ddof=1)
    se = np.array([4.0, 1.0]) * np.sqrt(2 / 19_999)
    assert np.all(np.abs(v - [4.0, 1.0]) < 3 * se)


def test_sample_terminal_repeatable_and_rejects_indefinite():
    a = sample_terminal(7, np.eye(2), 11).particles
    np.testing.assert_array_equal(a, sample_terminal(7, np.eye(2), 11).particles)
    with pytest.raises(ValueError):
        sample_terminal(7, -np.eye(2), 11)


def test_moments_examples():
    n, S, L = empirical_moments(np.array([[1.0], [3.0]]), np.eye(1))
    assert n[0] == 2.0 and S[0, 0] == 2.0 and L[0, 0] == 2.0
    n, S, L = empirical_moments(np.ones((5, 3)), np.eye(3))
    assert not S.any() and not L.any()
    with pytest.raises(DegenerateEnsembleError):
        empirical_moments(np.ones((1, 3)), np.eye(3))


def test_cross_covariance_identity(rng):
    Y = rng.standard_normal((50, 6)) @ rng.standard_normal((6, 6))
    C = rng.standard_normal((4, 6))
    _, S, L = empirical_moments(Y, C)
    assert np.linalg.norm(L - S @ C.T) / np.linalg.norm(L) < 1e-12


def test_exploration_covariance():
    np.testing.assert_allclose(exploration_covariance(scalar(R=2.0)), [[0.5]])
    assert exploration_covariance(scalar(kind="LEQG", theta=-0.8))[0, 0] == pytest.approx(1.25)
    assert exploration_covariance(scalar(kind="LEQG", theta=1.0))[0, 0] == pytest.approx(1.0)


def test_mean_field_examples():
    z = n = np.zeros(1)
    for prob in (scalar(sigma=1.0), scalar(sigma=0.3, kind="LEQG", theta=1.1),
                 scalar(sigma=0.3, kind="LEQG", theta=-0.8)):
        assert mean_field_term(z, n, np.eye(1), prob)[0] == 0.0
    out = mean_field_term(np.array([1.0]), np.zeros(1), np.array([[2.0]]), scalar(sigma=1.0))
    assert out[0] == pytest.approx(1.25)
    # sigma = 0 leaves only the cost-driven field
    out = mean_field_term(np.array([1.0]), np.array([0.5]), np.array([[2.0]]), scalar())
    assert out[0] == pytest.approx(0.5 * 2 * 1.5)


def test_mean_field_leqg_weights():
    S = np.array([[2.0]])
    z, n = np.array([1.0]), np.array([0.0])
    pos = mean_field_term(z, n, S, scalar(sigma=1.0, kind="LEQG", theta=0.5))
    assert pos[0] == pytest.approx(0.25 * 2 + 1.0 * 0.5)
    neg = mean_field_term(z, n, S, scalar(sigma=1.0, kind="LEQG", theta=-0.5))
    assert neg[0] == pytest.approx(0.25 * 2)


def test_simulator_step():
    prob = scalar(A=1.0)
    assert simulator_step(np.array([2.0]), np.array([-1.0]), 0.1, np.zeros(1), prob.dynamics)[0] == pytest.approx(0.1)
    dyn = gen_spring_mass_damper(2, 0.5).dynamics
    x = np.zeros((100_000, 4))
    a = np.zeros((100_000, 2))
    inc = simulator_step(x, a, 0.1, np.random.default_rng(0), dyn)
    assert np.abs(inc.mean(0)).max() < 5 * np.sqrt(0.025 / 1e5)
    np.testing.assert_allclose(np.cov(inc.T), dyn.Sigma * 0.1, atol=2e-3)


def test_simulator_consumes_fresh_steps():
    sim = Simulator(gen_spring_mass_damper(1, 1.0).dynamics, 3)
    a = sim(np.zeros(2), np.zeros(1), 1.0)
    b = sim(np.zeros(2), np.zeros(1), 1.0)
    assert not np.allclose(a, b) and sim.calls == 2
    again = Simulator(gen_spring_mass_damper(1, 1.0).dynamics, 3)
    np.testing.assert_array_equal(again(np.zeros(2), np.zeros(1), 1.0), a)


# ---------------------------------------------------------------- the algorithm

def test_large_ensemble_matches_euler_recursion():
    for prob in (gen_spring_mass_damper(2, 0.3, T=2.0),
                 gen_spring_mass_damper(2, 0.3, kind="LEQG", theta=1.1, T=2.0),
                 gen_spring_mass_damper(2, 0.3, kind="LEQG", theta=-0.8, T=2.0)):
        ref = euler_covariance(prob, 2.0, 0.02)
        out = run_offline(prob, EnkfConfig(N=40_000, T=2.0, seed=1))
        rel = np.linalg.norm(out.cov - ref, axis=(1, 2)) / np.linalg.norm(ref, axis=(1, 2))
        assert rel.max() < 0.03, prob.label()


@pytest.mark.parametrize("kind,theta", [("LQG", None), ("LEQG", 1.1), ("LEQG", -0.8)])
def test_euler_recursion_converges_to_dual_dre(kind, theta):
    # the N -> infinity limit of the particle covariance solves the dual DRE as tau -> 0
    prob = gen_spring_mass_damper(2, 0.3, kind=kind, theta=theta)
    exact = solve_dual_dre(prob, 2.0, 1e-3)
    errs = []
    for tau in (0.02, 0.01, 0.005):
        approx = euler_covariance(prob, 2.0, tau)
        errs.append(np.abs(approx - exact.on_grid(tau).values).max())
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.15)


def test_random_system_tracks_dual_dre():
    prob = gen_random_canonical(10, 2, T=10.0)
    ref = solve_dual_dre(prob, 10.0, 2e-3).on_grid(0.02).values
    out = run_offline(prob, EnkfConfig(N=2000, T=10.0, seed=0, record=("cov",)))
    rel = np.linalg.norm(out.cov - ref, axis=(1, 2)) / np.linalg.norm(ref, axis=(1, 2))
    assert rel.max() < 0.15


def test_covariance_error_scales_like_one_over_n():
    prob = gen_spring_mass_damper(2, 0.1, T=2.0)
    ref = euler_covariance(prob, 2.0, 0.02)
    Ns, mse = (250, 1000, 4000), []
    for N in Ns:
        outs = run_offline_batch(prob, EnkfConfig(N=N, T=2.0, record=("cov",)), range(60))
        mse.append(np.mean([np.max(np.sum((o.cov - ref) ** 2, axis=(1, 2))) for o in outs]))
    assert mse[0] > mse[1] > mse[2]
    assert -1.35 <= fit_scaling(Ns, mse).slope <= -0.65


def test_recovered_p_scales_like_one_over_n():
    prob = gen_spring_mass_damper(2, 0.1, T=2.0)
    refP = np.linalg.inv(euler_covariance(prob, 2.0, 0.02)[0])
    Ns, mse = (250, 1000, 4000), []
    for N in Ns:
        outs = run_offline_batch(prob, EnkfConfig(N=N, T=2.0, record=("prec",)), range(60))
        mse.append(np.mean([np.sum((o.P_bar - refP) ** 2) for o in outs]))
    assert -1.35 <= fit_scaling(Ns, mse).slope <= -0.65


def test_mean_stays_small():
    prob = gen_spring_mass_damper(2, 0.1, T=2.0)
    N = 400
    out = run_offline(prob, EnkfConfig(N=N, T=2.0, seed=3))
    bound = 5 * np.sqrt(np.trace(out.cov, axis1=1, axis2=2) / N)
    assert np.mean(np.linalg.norm(out.mean, axis=1) <= bound) > 0.95


def test_minimal_ensemble_runs():
    prob = gen_spring_mass_damper(2, 0.1, T=0.2)
    out = run_offline(prob, EnkfConfig(N=5, T=0.2))
    assert np.all(np.isfinite(out.cov))


def test_risk_seeking_never_inverts():
    prob = gen_spring_mass_damper(2, 0.1, kind="LEQG", theta=-0.8, T=1.0)
    out = run_offline(prob, EnkfConfig(N=50, T=1.0))
    assert out.diagnostics["coupling_inversions"] == 0
    # an ensemble too small to have a full-rank covariance still runs
    out = run_offline(prob, EnkfConfig(N=3, T=1.0, record=("mean", "cov")))
    assert out.diagnostics["coupling_inversions"] == 0
    assert np.all(np.isfinite(out.cov))


def test_rank_deficient_ensemble_is_rescued_and_counted():
    prob = gen_spring_mass_damper(2, 0.1, T=0.1)
    out = run_offline(prob, EnkfConfig(N=3, T=0.1))
    assert out.diagnostics["jitter_rescues"] == out.diagnostics["coupling_inversions"] > 0


def test_worker_and_chunk_invariance():
    prob = gen_spring_mass_damper(2, 0.2, kind="LEQG", theta=1.1, T=1.0)
    base = run_offline(prob, EnkfConfig(N=64, T=1.0, seed=42))
    for chunk, workers in ((8, 1), (8, 4), (20, 3)):
        other = run_offline(prob, EnkfConfig(N=64, T=1.0, seed=42, chunk_size=chunk, workers=workers))
        np.testing.assert_array_equal(base.cov, other.cov)
        np.testing.assert_array_equal(base.final.particles, other.final.particles)


def test_batch_matches_single_runs():
    prob = gen_spring_mass_damper(2, 0.2, T=1.0)
    cfg = EnkfConfig(N=30, T=1.0)
    batch = run_offline_batch(prob, cfg, [5, 6, 7])
    for o in batch:
        single = run_offline(prob, EnkfConfig(N=30, T=1.0, seed=o.seed))
        np.testing.assert_allclose(o.cov, single.cov, rtol=1e-12, atol=1e-15)


def test_exchangeability():
    prob = gen_spring_mass_damper(2, 0.2, T=1.0)
    N = 40
    ids = np.arange(N)
    perm = np.random.default_rng(0).permutation(N)
    a = run_offline(prob, EnkfConfig(N=N, T=1.0, seed=9), ids=ids)
    b = run_offline(prob, EnkfConfig(N=N, T=1.0, seed=9), ids=perm)
    np.testing.assert_allclose(b.cov, a.cov, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(b.prec, a.prec, rtol=1e-10)
    np.testing.assert_allclose(b.final.particles, a.final.particles[perm], rtol=1e-12, atol=1e-14)


def test_terminal_ensemble_uses_terminal_covariance():
    prob = gen_spring_mass_damper(2, 0.2, kind="LEQG", theta=2.0, T=0.02)
    out = run_offline(prob, EnkfConfig(N=20_000, T=0.02, seed=0))
    np.testing.assert_allclose(out.cov[-1], terminal_dual(prob), atol=0.02)


def test_csv_and_snapshot(tmp_path):
    prob = gen_spring_mass_damper(1, 0.2, T=0.1)
    out = run_offline(prob, EnkfConfig(N=10, T=0.1, seed=1))
    out.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "t,n_0,n_1,S_0_0,S_0_1,S_1_0,S_1_1,P_0_0,P_0_1,P_1_0,P_1_1"
    assert len(lines) == 7
    out.save_snapshot(tmp_path / "s.npz")
    back = EnkfOutput.load_snapshot(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.prec, out.prec)
    np.testing.assert_array_equal(back.final.particles, out.final.particles)


def test_config_validation():
    with pytest.raises(ValueError):
        EnkfConfig(N=10, T=1.0, tau=0.3)
    with pytest.raises(DegenerateEnsembleError):
        EnkfConfig(N=1, T=1.0)
    with pytest.raises(ValueError):
        EnkfConfig(N=10, T=1.0, record=("bogus",))


def test_invalid_problem_rejected():
    from dual_enkf.model import AssumptionError
    with pytest.raises(AssumptionError):
        run_offline(scalar(R=-1.0), EnkfConfig(N=10, T=0.1))


def test_ensemble_ids_default():
    e = Ensemble(np.zeros((4, 2)), 0)
    assert e.N == 4 and e.ids.tolist() == [0, 1, 2, 3]
    z = CounterStream(0).normals(Channel.TERMINAL, 0, 2, ids=e.ids)
    assert z.shape == (4, 2)
