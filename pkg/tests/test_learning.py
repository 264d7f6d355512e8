import math
import warnings

import mpmath
import numpy as np
import pytest

from stratext.eqdiff import Loss
from stratext.equilibrium import SolverConfig, solve_ne
from stratext.errors import ConfigurationError, TrainingError, UnsupportedConfigurationError, UsageError
from stratext.game import Externality, ExternalityModel, GameInstance
from stratext.learning import (Dataset, GameSpec, Mode, PopulationModel, TrainConfig, _peer_externality,
                               empirical_risk, estimate_externality_lipschitz, externality_peer_gradient,
                               imperfect_info_check, lipschitz_constants, make_dataset, per_sample_loss,
                               sample_complexity, sample_instance, train)

from conftest import random_instance, random_omega

LN2 = math.log(2.0)


def small_setup(n=12, seed=0, variant=Externality.CONVEX_SQUARE_SUM, beta=1.0):
    pop = PopulationModel(k_weights=(0.0, 0.5, 0.5))
    game = GameSpec(1.0, beta, variant)
    return make_dataset(pop, game, n, seed), make_dataset(pop, game, n, seed + 1)


# ------------------------------------------------------------ sampling

def test_population_validation():
    with pytest.raises(ConfigurationError):
        PopulationModel(k_weights=(0.5, 0.6))
    with pytest.raises(ConfigurationError):
        PopulationModel(mean_pos=(1.2, 0.3))
    with pytest.raises(ConfigurationError):
        PopulationModel(mean_pos=(0.5,), mean_neg=(0.5, 0.5))


def test_point_mass_at_one_gives_single_agents():
    pop = PopulationModel(k_weights=(1.0, 0.0, 0.0))
    rng = np.random.default_rng(3)
    for _ in range(50):
        inst = sample_instance(pop, rng)
        assert inst.k == 1 and inst.k_max == 3


def test_sampling_is_deterministic():
    pop = PopulationModel(k_weights=(0.2, 0.3, 0.5))
    a = sample_instance(pop, np.random.default_rng(9))
    b = sample_instance(pop, np.random.default_rng(9))
    assert a.k == b.k
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_features_lie_in_box_and_class_ratio_concentrates():
    pop = PopulationModel(stddev=0.5, pos_fraction=0.3)
    X, y = pop.sample_points(10_000, np.random.default_rng(1))
    assert X.min() >= 0 and X.max() <= 1
    p = 0.3
    sigma = math.sqrt(p * (1 - p) / 10_000)
    assert abs(np.mean(y == 1) - p) <= 3 * sigma


def test_k_distribution_matches_weights():
    pop = PopulationModel(k_weights=(0.1, 0.6, 0.3))
    rng = np.random.default_rng(4)
    ks = np.array([sample_instance(pop, rng).k for _ in range(3000)])
    for k, p in zip((1, 2, 3), (0.1, 0.6, 0.3)):
        assert abs(np.mean(ks == k) - p) <= 3 * math.sqrt(p * (1 - p) / 3000)


# ------------------------------------------------------------ risk

def test_zero_weights_give_log_two(rng):
    for variant in Externality:
        inst = random_instance(rng, variant, k=3, d=2)
        assert per_sample_loss(inst, np.zeros(2)) == pytest.approx(LN2, abs=1e-15)
    data, _ = small_setup()
    assert empirical_risk(data, np.zeros(2)) == pytest.approx(LN2, abs=1e-15)


def test_single_agent_closed_form_loss():
    alpha, x, w = 1.3, np.array([0.4, 0.9]), np.array([0.8, 0.6])
    inst = GameInstance.build(x[None], labels=[-1], alpha=alpha)
    z = w @ np.clip(x + w / (2 * alpha), 0, 1)
    assert per_sample_loss(inst, w, Loss.LOGISTIC, SolverConfig(kkt_tolerance=1e-12)) == pytest.approx(
        math.log1p(math.exp(z)), abs=1e-10)


@pytest.mark.parametrize("variant", list(Externality))
def test_loss_invariant_under_agent_permutation(variant, rng):
    cfg = SolverConfig(kkt_tolerance=1e-12)
    for _ in range(5):
        inst = random_instance(rng, variant, k=4, d=2)
        w = random_omega(rng, 2)
        order = rng.permutation(4)
        a = per_sample_loss(inst, w, Loss.LOGISTIC, cfg)
        b = per_sample_loss(inst.permuted(order), w, Loss.LOGISTIC, cfg)
        assert abs(a - b) <= 1e-10


def test_empirical_risk_is_order_independent():
    data, _ = small_setup(n=10)
    w = np.array([1.0, -0.5])
    single = Dataset(data.instances[:1], 0)
    assert empirical_risk(single, w) == per_sample_loss(data.instances[0], w)
    losses = [per_sample_loss(inst, w) for inst in data.instances]
    order = np.random.default_rng(2).permutation(len(losses))
    total = 0.0
    for j in order:
        total += losses[j]
    assert empirical_risk(data, w) == pytest.approx(total / len(losses), abs=1e-12)


# ------------------------------------------------------------ training

def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(norm_budget=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=-1.0)
    assert TrainConfig(mode="truthful").mode is Mode.TRUTHFUL


def test_zero_learning_rate_keeps_initial_loss():
    data, val = small_setup(n=8)
    trace = train(data, val, TrainConfig(epochs=3, batch_size=3, learning_rate=0.0))
    assert len(trace.train_loss) == len(trace.val_loss) == 3
    np.testing.assert_allclose(trace.train_loss, trace.initial_train_loss, atol=1e-12)
    np.testing.assert_allclose(trace.val_loss, trace.initial_val_loss, atol=1e-12)
    np.testing.assert_array_equal(trace.omega, np.zeros(2))


def test_projection_holds_after_every_step():
    data, val = small_setup(n=8)
    norms = []
    train(data, val, TrainConfig(epochs=2, batch_size=2, learning_rate=50.0, norm_budget=0.7),
          on_step=lambda w: norms.append(np.linalg.norm(w)))
    assert len(norms) == 8
    assert max(norms) <= 0.7 + 1e-12


def test_training_is_deterministic():
    data, val = small_setup(n=8)
    cfg = TrainConfig(epochs=2, batch_size=3, rng_seed=5)
    a, b = train(data, val, cfg), train(data, val, cfg)
    assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
    assert a.omega.tobytes() == b.omega.tobytes()


def test_divergence_raises_training_error():
    data, val = small_setup(n=4)
    with pytest.raises(TrainingError):
        train(data, val, TrainConfig(epochs=1, batch_size=2, learning_rate=float("inf")))


def test_empty_training_set_is_rejected():
    _, val = small_setup(n=2)
    with pytest.raises(UsageError):
        train(Dataset((), 0), val, TrainConfig(epochs=1))


@pytest.mark.parametrize("mode", list(Mode))
def test_every_mode_reduces_its_training_loss(mode):
    data, val = small_setup(n=16, seed=3)
    trace = train(data, val, TrainConfig(epochs=4, batch_size=4, mode=mode))
    assert trace.train_loss[-1] < trace.initial_train_loss


def test_strategic_training_beats_truthful_under_strategic_validation():
    data, val = small_setup(n=24, seed=11)
    cfg = dict(epochs=8, batch_size=8, learning_rate=1.0, norm_budget=3.0)
    s = train(data, val, TrainConfig(mode=Mode.STRATEGIC, **cfg))
    t = train(data, val, TrainConfig(mode=Mode.TRUTHFUL, **cfg))
    assert s.val_loss[-1] < s.initial_val_loss
    assert s.val_loss[-1] < t.val_loss[-1]


# ------------------------------------------------------------ Lipschitz constants

def _omegas(rng, d, n=20, r=2.0):
    return [random_omega(rng, d, r) for _ in range(n)]


def test_constants_without_externality(rng):
    for alpha, k in ((1.0, 2), (2.0, 3), (4.0, 4)):
        inst = GameInstance.build(rng.uniform(size=(k, 2)), alpha=alpha, beta=0.0, variant="proportional")
        reports = [rng.uniform(size=(k, 2)) for _ in range(10)]
        c, gamma, eta = lipschitz_constants(inst, _omegas(rng, 2), reports)
        # stacked identities have singular values sqrt(k)
        assert c == pytest.approx(alpha)
        assert gamma == pytest.approx(math.sqrt(k) + 1)
        assert eta == pytest.approx((math.sqrt(k) + 1) / alpha)


def test_eta_scales_inversely_with_alpha(rng):
    etas = []
    for alpha in (1.0, 2.0, 4.0):
        inst = GameInstance.build(np.full((3, 2), 0.5), alpha=alpha, beta=0.0, variant="congestion")
        etas.append(lipschitz_constants(inst, _omegas(rng, 2), [np.full((3, 2), 0.3)])[2])
    assert etas[0] / etas[1] == pytest.approx(2.0) and etas[1] / etas[2] == pytest.approx(2.0)


@pytest.mark.parametrize("variant", [Externality.PROPORTIONAL, Externality.CONGESTION])
def test_equilibrium_map_respects_eta(variant, rng):
    inst = random_instance(rng, variant, k=3, d=2, alpha=1.0)
    reports = [rng.uniform(size=(3, 2)) for _ in range(300)]
    c, gamma, eta = lipschitz_constants(inst, _omegas(rng, 2), reports)
    cfg = SolverConfig(kkt_tolerance=1e-12)
    for _ in range(30):
        w1, w2 = random_omega(rng, 2, 3.0), random_omega(rng, 2, 3.0)
        d_ne = np.linalg.norm(solve_ne(inst, w1, cfg).reports - solve_ne(inst, w2, cfg).reports)
        assert d_ne / np.linalg.norm(w1 - w2) <= eta


def test_constants_need_smooth_variant(rng):
    inst = random_instance(rng, Externality.CONVEX_SQUARE_SUM, k=2, d=2, beta=1.0)
    with pytest.raises(UnsupportedConfigurationError):
        lipschitz_constants(inst, _omegas(rng, 2), [rng.uniform(size=(2, 2))])


# ------------------------------------------------------------ sample complexity

def oracle_n(eps, gamma, d, lam, eta, r):
    mpmath.mp.dps = 50
    e, g, l, et, rr = (mpmath.mpf(str(v)) for v in (eps, gamma, lam, eta, r))
    val = 8 / e**2 * (mpmath.log(mpmath.e / g) + d * mpmath.log(16 * l * (d + et * rr) * g / e))
    return int(mpmath.ceil(val))


def test_sample_complexity_reference_value():
    # frozen from the 50-digit evaluation: 8281.4... -> 8282
    assert oracle_n(0.1, 0.05, 2, 1, 1, 1) == 8282
    assert sample_complexity(0.1, 0.05, 2, 1, 1, 1) == 8282


def test_sample_complexity_monotonicity():
    base = dict(gamma=0.05, d=2, lipschitz=1.0, eta=1.0, r=1.0)
    for eps in (0.3, 0.1, 0.05):
        assert sample_complexity(eps / 2, **base) > 4 * sample_complexity(eps, **base)
    ns = [sample_complexity(0.1, **{**base, "d": d}) for d in range(1, 8)]
    assert ns == sorted(ns)
    ns = [sample_complexity(0.1, **{**base, "eta": eta}) for eta in (0.5, 1, 2, 4, 8)]
    assert ns == sorted(ns)


def test_sample_complexity_domain_errors():
    with pytest.raises(UsageError):
        sample_complexity(0.0, 0.05, 2, 1, 1, 1)
    with pytest.raises(UsageError):
        sample_complexity(1.5, 0.05, 2, 1, 1, 1)
    with pytest.raises(UsageError):
        sample_complexity(0.1, -0.05, 2, 1, 1, 1)


# ------------------------------------------------------------ imperfect information

@pytest.mark.parametrize("variant", [Externality.CONVEX_SQUARE_SUM, Externality.PROPORTIONAL])
def test_peer_gradient_matches_finite_differences(variant, rng):
    m = ExternalityModel(variant, 0.8, 4)
    x_i, xr_i = rng.uniform(size=2), rng.uniform(size=2)
    Xp, Xrp = rng.uniform(size=(3, 2)), rng.uniform(size=(3, 2))
    G = externality_peer_gradient(m, x_i, xr_i, Xp, Xrp)
    h = 1e-6
    for idx in np.ndindex(*Xp.shape):
        E = np.zeros_like(Xp)
        E[idx] = h
        fd = (_peer_externality(m, x_i, xr_i, Xp + E, Xrp) - _peer_externality(m, x_i, xr_i, Xp - E, Xrp)) / (2 * h)
        assert G[idx] == pytest.approx(fd, abs=1e-7)


def test_congestion_ignores_peers_true_features():
    m = ExternalityModel(Externality.CONGESTION, 0.4, 3)
    assert estimate_externality_lipschitz(m, 2, 100) == 0.0


def _biases(rng, k, d, scale):
    b = rng.normal(size=(k, max(k - 1, 0), d))
    norms = np.linalg.norm(b.reshape(k, -1), axis=1)
    return b * (scale * rng.uniform(size=k) / np.maximum(norms, 1e-300))[:, None, None]


def test_no_bias_means_no_gain(rng):
    for variant in Externality:
        inst = random_instance(rng, variant, k=3, d=2)
        w = random_omega(rng, 2)
        eq = solve_ne(inst, w, SolverConfig(kkt_tolerance=1e-12))
        rep = imperfect_info_check(inst, w, eq, np.zeros((3, 2, 2)), 1.0, 300, rng)
        assert rep.max_gain <= 1e-9 and np.all(rep.bounds == 0) and rep.satisfied


def test_bias_is_irrelevant_without_externality(rng):
    inst = random_instance(rng, Externality.PROPORTIONAL, k=3, d=2, beta=0.0)
    w = random_omega(rng, 2)
    eq = solve_ne(inst, w, SolverConfig(kkt_tolerance=1e-12))
    rep = imperfect_info_check(inst, w, eq, _biases(rng, 3, 2, 0.5), 0.0, 300, rng)
    assert rep.max_gain <= 1e-9


@pytest.mark.parametrize("variant", list(Externality))
def test_small_bias_gain_within_bound(variant, rng):
    for _ in range(5):
        inst = random_instance(rng, variant, k=3, d=2)
        m = inst.externality
        lam = estimate_externality_lipschitz(m, 2, 2000, rng, margin=0.1)
        w = random_omega(rng, 2)
        eq = solve_ne(inst, w, SolverConfig(kkt_tolerance=1e-12))
        rep = imperfect_info_check(inst, w, eq, _biases(rng, 3, 2, 0.1), lam, 500, rng)
        assert rep.satisfied
