import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskwadc.comms import CommGraph, SparsityMask, mask_from_graph
from riskwadc.errors import InfeasibleGainError, ValidationError
from riskwadc.netmodel import DiscreteSystem
from riskwadc.risklqr import compute_moments, eval_R0_analytic, is_schur_stable, max_oracle
from riskwadc.sgdmax import (
    AnalyticEvaluator, FunctionEvaluator, McEvaluator, TrainConfig, ZopgConfig, average_gradient,
    initial_gain, load_checkpoint, sample_sphere, save_checkpoint, train, zopg_estimate,
)
from riskwadc.sim import NoiseModel, ScenarioConfig

AREAS = {0: 0, 1: 0, 4: 0, 2: 1, 3: 1, 5: 1}
TOY = DiscreteSystem([[1.05]], [[1.0]], 0.01)
EYE = np.eye(1)


def toy_moments(c=0.5):
    return compute_moments(NoiseModel.gaussian([[0.01]]), EYE, c)


# --- sphere sampling ------------------------------------------------------------------

def test_sphere_draws_are_unit_and_masked():
    mask = mask_from_graph(CommGraph.from_areas(3, 1, {0: 0, 1: 0, 2: 1, 3: 1}))
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        U = sample_sphere(mask, rng=rng)
        assert abs(np.linalg.norm(U) - 1.0) <= 1e-12
        assert np.all(U[~mask.pattern] == 0)


def test_sphere_mean_vanishes():
    mask = SparsityMask.dense(2, 3)
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((100_000, 2, 3))
    Us = Z / np.linalg.norm(Z, axis=(1, 2), keepdims=True)
    # same construction as sample_sphere, vectorized
    assert np.allclose(sample_sphere(mask, seed=5), sample_sphere(mask, seed=5))
    assert np.all(np.abs(Us.mean(axis=0)) < 4 / np.sqrt(100_000))
    single = np.stack([sample_sphere(mask, rng=rng) for _ in range(20_000)])
    assert np.all(np.abs(single.mean(axis=0)) < 4 / np.sqrt(20_000))


def test_empty_mask_rejected():
    with pytest.raises(ValidationError):
        sample_sphere(SparsityMask(np.zeros((1, 4), dtype=bool)))


# --- estimators -------------------------------------------------------------------------

def test_constant_landscape_estimate():
    mask = SparsityMask.dense(2, 2)
    U = sample_sphere(mask, seed=3)
    assert np.allclose(zopg_estimate(2.5, U, 0.1), 4 / 0.1 * 2.5 * U)
    gs = average_gradient(FunctionEvaluator(lambda K: 2.5), np.zeros((2, 2)), mask, ZopgConfig(0.1, 20_000), seed=0)
    # sphere symmetry: the average tends to zero at rate n/r * l0 / sqrt(M)
    assert np.abs(gs.G).max() < 4 * 4 / 0.1 * 2.5 / np.sqrt(20_000)


@pytest.mark.parametrize("estimator", ["one-point", "antithetic"])
def test_quadratic_landscape_direction(estimator):
    # for a quadratic the sphere-smoothed function differs by a constant,
    # so its finite-difference gradient is that of the quadratic itself
    rng = np.random.default_rng(2)
    L = rng.standard_normal((3, 3))
    H = L @ L.T + np.eye(3)
    b = rng.standard_normal(3)
    f = lambda K: float(K.ravel() @ H @ K.ravel() / 2 + b @ K.ravel())
    K = np.array([[0.3, -0.2, 0.5]])
    h = 1e-5
    fd = np.array([(f(K + h * e) - f(K - h * e)) / (2 * h) for e in np.eye(3).reshape(3, 1, 3)]).reshape(1, 3)
    gs = average_gradient(FunctionEvaluator(f), K, SparsityMask.dense(1, 3), ZopgConfig(0.05, 100_000, estimator=estimator), 0)
    cos = np.sum(gs.G * fd) / np.linalg.norm(gs.G) / np.linalg.norm(fd)
    # "5% angular error": at most 5% of a right angle
    assert np.arccos(min(cos, 1.0)) <= 0.05 * np.pi / 2


def test_single_sample_is_one_estimate():
    mask = SparsityMask.dense(1, 2)
    f = lambda K: float(np.sum(K**2)) + 1.0
    K = np.array([[0.5, 0.1]])
    gs = average_gradient(FunctionEvaluator(f), K, mask, ZopgConfig(0.1, 1), seed=4, j=7)
    U = sample_sphere(mask, rng=np.random.default_rng(np.random.SeedSequence(4, spawn_key=(7, 0, 0))))
    assert np.array_equal(gs.G, zopg_estimate(f(K + 0.1 * U), U, 0.1, 2))


def test_variance_scales_inverse_with_samples():
    mask = SparsityMask.dense(1, 2)
    f = lambda K: float(np.sum(K**2)) + 1.0
    K = np.array([[0.5, 0.1]])
    ev = FunctionEvaluator(f)
    v = {}
    for M in (25, 100):
        Gs = np.stack([average_gradient(ev, K, mask, ZopgConfig(0.1, M), seed=s).G for s in range(400)])
        v[M] = Gs.var(axis=0).mean()
    assert v[25] / v[100] == pytest.approx(4.0, rel=0.3)


def test_gradient_is_deterministic():
    mask = SparsityMask.dense(1, 1)
    ev = AnalyticEvaluator(TOY, toy_moments(), EYE, EYE)
    a = average_gradient(ev, np.array([[0.4]]), mask, ZopgConfig(0.1, 50), seed=9, j=3)
    b = average_gradient(ev, np.array([[0.4]]), mask, ZopgConfig(0.1, 50), seed=9, j=3)
    assert np.array_equal(a.G, b.G)


def test_config_validation():
    with pytest.raises(ValidationError):
        ZopgConfig(radius=0.0)
    with pytest.raises(ValidationError):
        ZopgConfig(estimator="three-point")
    with pytest.raises(ValidationError):
        TrainConfig(eta=-1)
    default = ZopgConfig()
    assert (default.radius, default.samples) == (0.1, 100)
    assert (TrainConfig().eta, TrainConfig().iters) == (1e-4, 15000)


# --- initial gain -------------------------------------------------------------------------

def test_stable_open_loop_starts_at_zero():
    sys = DiscreteSystem(np.diag([0.5, 0.9, 0.1, 0.2]), np.ones((4, 1)), 0.01, 1, 0)
    assert not initial_gain(sys, SparsityMask.full(1, 1)).any()


def test_unstable_open_loop_gets_a_feasible_masked_gain(two_area_sys):
    mask = mask_from_graph(CommGraph.from_areas(4, 2, AREAS, [(0, 1)]))
    K0 = initial_gain(two_area_sys, mask)
    assert mask.respects(K0)
    assert is_schur_stable(two_area_sys.A - two_area_sys.B @ K0)


def test_decentralized_two_area_start_is_reported_infeasible(two_area_sys):
    # without the inter-area link the projected LQR gain destabilizes at every scale
    mask = mask_from_graph(CommGraph.from_areas(4, 2, AREAS))
    with pytest.raises(InfeasibleGainError) as exc:
        initial_gain(two_area_sys, mask)
    assert exc.value.spectral_radius > 1.0


def test_no_actuation_is_infeasible():
    sys = DiscreteSystem(np.diag([1.2, 0.5, 0.5, 0.5]), np.ones((4, 1)), 0.01, 1, 0)
    with pytest.raises(InfeasibleGainError):
        initial_gain(sys, SparsityMask(np.zeros((1, 4), dtype=bool)))


def test_infeasible_k0_is_reported():
    mask = SparsityMask.dense(1, 1)
    ev = AnalyticEvaluator(TOY, toy_moments(), EYE, EYE)
    with pytest.raises(InfeasibleGainError) as exc:
        train(ev, mask, TrainConfig(iters=1, K0=np.array([[0.0]])), ZopgConfig(0.1, 2))
    assert exc.value.spectral_radius == pytest.approx(1.05)


# --- training -------------------------------------------------------------------------------

def test_zero_gradient_stub_keeps_k0():
    mask = SparsityMask.dense(2, 3)
    K0 = np.arange(6.0).reshape(2, 3) / 10
    log = train(FunctionEvaluator(lambda K: 0.0), mask, TrainConfig(eta=1.0, iters=50, K0=K0), ZopgConfig(0.1, 5))
    assert np.array_equal(log.K, K0)
    assert log.iters[-1] == 49


def test_zero_iterations_return_k0(two_area_sys):
    mask = SparsityMask.full(6, 4)
    mom = compute_moments(NoiseModel.isotropic(16, 0.01), np.eye(16), 0.5)
    log = train(AnalyticEvaluator(two_area_sys, mom, np.eye(16), np.eye(6)), mask, TrainConfig(iters=0), ZopgConfig())
    assert np.array_equal(log.K, log.K0) and len(log) == 0


def test_sparsity_preserved_on_every_iterate(two_area_sys):
    mask = mask_from_graph(CommGraph.from_areas(4, 2, AREAS, [(0, 1)]))
    mom = compute_moments(NoiseModel.isotropic(16, 0.01), np.eye(16), 0.5)
    cfg = ScenarioConfig(horizon=100, impulse_scale=0.1, noise=NoiseModel.isotropic(16, 0.01), max_delay_s=0.05)
    ev = McEvaluator(two_area_sys, mom, np.eye(16), np.eye(6), cfg)
    seen = []

    def check(j, K):
        seen.append(j)
        assert np.all(K[~mask.pattern] == 0)

    train(ev, mask, TrainConfig(eta=1e-3, iters=10, seed=1), ZopgConfig(0.1, 4, estimator="antithetic"), callback=check)
    assert seen == list(range(11))


def test_training_is_deterministic():
    mask = SparsityMask.dense(1, 1)
    cfg = TrainConfig(eta=0.05, iters=200, seed=3, K0=np.array([[0.3]]))
    runs = [train(AnalyticEvaluator(TOY, toy_moments(), EYE, EYE), mask, cfg, ZopgConfig(0.1, 10)) for _ in range(2)]
    assert np.array_equal(runs[0].K, runs[1].K)
    assert runs[0].phi == runs[1].phi and runs[0].grad_norm == runs[1].grad_norm


def test_scalar_toy_reaches_grid_minimizer():
    mom = toy_moments()
    grid = np.round(np.arange(0, 2.0005, 1e-3), 3)
    phis = np.array([max_oracle(TOY, [[k]], mom, EYE, EYE).phi for k in grid])
    k_star = grid[phis.argmin()]
    log = train(AnalyticEvaluator(TOY, mom, EYE, EYE), SparsityMask.dense(1, 1),
                TrainConfig(eta=0.1, iters=2000, seed=0, K0=np.array([[0.2]]), log_every=100), ZopgConfig(0.1, 100))
    assert log.K[0, 0] == pytest.approx(k_star, rel=0.05)


def test_descent_trend_on_scalar_toy():
    mom = toy_moments()
    phi = []
    train(AnalyticEvaluator(TOY, mom, EYE, EYE), SparsityMask.dense(1, 1),
          TrainConfig(eta=0.01, iters=2000, seed=2, K0=np.array([[0.2]]), log_every=1000), ZopgConfig(0.1, 100),
          callback=lambda j, K: phi.append(max_oracle(TOY, K, mom, EYE, EYE).phi))
    windows = np.array(phi[1:]).reshape(-1, 100).mean(axis=1)
    steps = np.diff(windows)
    assert np.mean(steps <= 0) >= 0.9


def test_risk_neutral_reduces_to_plain_lqr_training():
    mom = toy_moments(c=1e6)  # risk constraint never active
    mask = SparsityMask.dense(1, 1)
    cfg = TrainConfig(eta=0.05, iters=100, seed=4, K0=np.array([[0.4]]))
    a = train(AnalyticEvaluator(TOY, mom, EYE, EYE, lambda_max=0.0), mask, cfg, ZopgConfig(0.1, 20))
    r0 = lambda K: eval_R0_analytic(TOY, K, mom, EYE, EYE)
    b = train(FunctionEvaluator(r0), mask, cfg, ZopgConfig(0.1, 20))
    np.testing.assert_allclose(a.K, b.K, rtol=1e-12)
    np.testing.assert_allclose(a.phi, b.phi, rtol=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_multiplier_log_is_in_unit_interval(seed):
    mom = toy_moments(c=1e-6)
    log = train(AnalyticEvaluator(TOY, mom, EYE, EYE), SparsityMask.dense(1, 1),
                TrainConfig(eta=1e-4, iters=5, seed=seed, K0=np.array([[0.6]])), ZopgConfig(0.1, 8))
    assert all(0.0 <= f <= 1.0 for f in log.lambda_frac)
    assert log.lambda_frac[-1] == 1.0


def test_checkpoint_roundtrip(tmp_path):
    mask = mask_from_graph(CommGraph.empty(2, 1))
    K = mask.apply(np.random.default_rng(0).standard_normal((3, 8)))
    p = tmp_path / "ck.json"
    save_checkpoint(p, K, mask, 12, 3, "moments.json", {"risk": "on"})
    K2, m2, doc = load_checkpoint(p)
    assert np.array_equal(K, K2) and np.array_equal(mask.pattern, m2.pattern)
    assert doc["iteration"] == 12 and doc["risk"] == "on"
    (tmp_path / "bad.json").write_text("[")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.json")


def test_trainlog_csv(tmp_path):
    log = train(AnalyticEvaluator(TOY, toy_moments(), EYE, EYE), SparsityMask.dense(1, 1),
                TrainConfig(eta=0.01, iters=3, K0=np.array([[0.5]])), ZopgConfig(0.1, 4))
    p = tmp_path / "log.csv"
    log.write_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "iter,phi,lambda_frac,grad_norm,rc_est" and len(rows) == 4
