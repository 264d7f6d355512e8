"""Sampling, risk, strategic training and the analysis formulas."""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .eqdiff import DegenerateJacobianWarning, Loss, _strategic_loss_and_gradient, require_smooth
from .equilibrium import SolverConfig, solve_ne
from .errors import ConfigurationError, TrainingError, UsageError
from .game import (ConstantGain, CostModel, Externality, ExternalityModel, GameInstance,
                   OutOfRangeWarning, _weights, cost, cross_hessian, potential_hessian,
                   project_to_ball, score)


@dataclass(frozen=True)
class GameSpec:
    """Cost, externality and gain settings shared by every sampled instance."""

    alpha: float = 1.0
    beta: float = 1.0
    variant: Externality = Externality.CONVEX_SQUARE_SUM
    gain: float = 1.0

    def instance(self, features, labels, k):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfRangeWarning)
            return GameInstance(features, labels, k, CostModel(self.alpha),
                                ExternalityModel(self.variant, self.beta, k), ConstantGain(self.gain))


@dataclass(frozen=True)
class PopulationModel:
    """Two Gaussian blobs clipped to the unit box, plus a distribution over k."""

    mean_pos: tuple = (0.7, 0.3)
    mean_neg: tuple = (0.3, 0.7)
    stddev: float = 0.15
    pos_fraction: float = 0.5
    k_weights: tuple = (0.0, 0.0, 0.0, 1.0)

    def __post_init__(self):
        w = np.asarray(self.k_weights, dtype=float)
        if len(self.mean_pos) != len(self.mean_neg) or not self.mean_pos:
            raise ConfigurationError("class means must share a positive dimension", key="mean_pos")
        for key in ("mean_pos", "mean_neg"):
            m = np.asarray(getattr(self, key))
            if np.any(m < 0) or np.any(m > 1):
                raise ConfigurationError("class means must lie in [0, 1]", key=key)
        if not self.stddev >= 0:
            raise ConfigurationError("stddev must be nonnegative", key="stddev")
        if not 0 <= self.pos_fraction <= 1:
            raise ConfigurationError("pos_fraction must lie in [0, 1]", key="pos_fraction")
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ConfigurationError("k_weights must be a probability vector", key="k_weights")

    @property
    def d(self):
        return len(self.mean_pos)

    @property
    def k_max(self):
        return len(self.k_weights)

    def sample_points(self, n, rng):
        y = np.where(rng.uniform(size=n) < self.pos_fraction, 1, -1)
        means = np.where(y[:, None] > 0, np.asarray(self.mean_pos), np.asarray(self.mean_neg))
        X = np.clip(means + self.stddev * rng.standard_normal((n, self.d)), 0.0, 1.0)
        return X, y


def sample_instance(pop, rng, game=None):
    """Draw k from the participant distribution and k_max i.i.d. (x, y) rows."""
    game = game or GameSpec()
    k = int(rng.choice(np.arange(1, pop.k_max + 1), p=np.asarray(pop.k_weights) / np.sum(pop.k_weights)))
    X, y = pop.sample_points(pop.k_max, rng)
    return game.instance(X, y, k)


@dataclass(frozen=True)
class Dataset:
    instances: tuple
    rng_seed: int

    def __len__(self):
        return len(self.instances)


def make_dataset(pop, game, n, seed):
    rng = np.random.default_rng(seed)
    return Dataset(tuple(sample_instance(pop, rng, game) for _ in range(n)), seed)


# --------------------------------------------------------------------- risk

def per_sample_loss(inst, omega, loss=Loss.LOGISTIC, solver=None):
    eq = solve_ne(inst, omega, solver or SolverConfig())
    z = eq.active_reports @ _weights(omega)
    return float(Loss(loss).value_of(z, inst.labels[: inst.k]).mean())


def empirical_risk(data, omega, loss=Loss.LOGISTIC, solver=None):
    instances = data.instances if isinstance(data, Dataset) else data
    return float(np.mean([per_sample_loss(inst, omega, loss, solver) for inst in instances]))


def truthful_loss_and_gradient(inst, omega, loss):
    X = inst.active_features
    y = inst.labels[: inst.k]
    z = X @ omega
    return float(loss.value_of(z, y).mean()), (loss.derivative(z, y)[:, None] * X).mean(axis=0)


# ----------------------------------------------------------------- training

class Mode(str, enum.Enum):
    STRATEGIC = "strategic"
    TRUTHFUL = "truthful"
    COST_ONLY = "cost_only"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1.0
    norm_budget: float = 3.0
    loss: Loss = Loss.LOGISTIC
    solver: SolverConfig = field(default_factory=SolverConfig)
    mode: Mode = Mode.STRATEGIC
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", Loss(self.loss))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative", key="learning_rate")
        if not self.norm_budget > 0:
            raise ConfigurationError("norm_budget must be positive", key="norm_budget")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs >= 0 and batch_size >= 1 required", key="epochs")


@dataclass
class TrainTrace:
    train_loss: list
    val_loss: list
    omega: np.ndarray
    initial_train_loss: float
    initial_val_loss: float
    degenerate_steps: int = 0


def _instance_loss_and_gradient(inst, omega, cfg):
    if cfg.mode is Mode.TRUTHFUL:
        return truthful_loss_and_gradient(inst, omega, cfg.loss)
    if cfg.mode is Mode.COST_ONLY:
        inst = inst.with_beta(0.0)
    return _strategic_loss_and_gradient(inst, omega, cfg.loss, cfg.solver)


def training_loss(data, omega, cfg):
    """Loss of ``omega`` under the agent model the mode trains against."""
    def one(inst):
        if cfg.mode is Mode.TRUTHFUL:
            return truthful_loss_and_gradient(inst, omega, cfg.loss)[0]
        if cfg.mode is Mode.COST_ONLY:
            inst = inst.with_beta(0.0)
        return per_sample_loss(inst, omega, cfg.loss, cfg.solver)
    return float(np.mean([one(inst) for inst in data.instances]))


def train(data, val_data, cfg, omega0=None, on_step=None):
    """Minibatch projected gradient descent on the weights.

    Training gradients follow ``cfg.mode``; validation is always the fully
    strategic loss. ``train_loss[e]`` is the mean minibatch loss seen during
    epoch ``e``; ``val_loss[e]`` is measured after it. ``on_step(omega)`` is
    called after every projected update.
    """
    if len(data) == 0:
        raise UsageError("training data is empty")
    d = data.instances[0].d
    omega = np.zeros(d) if omega0 is None else project_to_ball(omega0, cfg.norm_budget)
    rng = np.random.default_rng(cfg.rng_seed)
    trace = TrainTrace([], [], omega, training_loss(data, omega, cfg),
                       empirical_risk(val_data, omega, cfg.loss, cfg.solver))
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses, batch_sizes = [], []
        for start in range(0, n, cfg.batch_size):
            batch = [data.instances[j] for j in order[start:start + cfg.batch_size]]
            losses, grads = [], []
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DegenerateJacobianWarning)
                for inst in batch:
                    l, g = _instance_loss_and_gradient(inst, omega, cfg)
                    losses.append(l)
                    grads.append(g)
            trace.degenerate_steps += sum(issubclass(w.category, DegenerateJacobianWarning)
                                          for w in caught)
            grad = np.mean(grads, axis=0)
            if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(losses))):
                raise TrainingError("non-finite loss or gradient during training")
            batch_losses.append(np.mean(losses))
            batch_sizes.append(len(batch))
            with np.errstate(invalid="ignore", over="ignore"):
                omega = project_to_ball(omega - cfg.learning_rate * grad, cfg.norm_budget)
            if not np.all(np.isfinite(omega)):
                raise TrainingError("weights became non-finite; learning rate too large")
            if on_step is not None:
                on_step(omega)
        trace.train_loss.append(float(np.average(batch_losses, weights=batch_sizes)))
        val = empirical_risk(val_data, omega, cfg.loss, cfg.solver)
        if not math.isfinite(val):
            raise TrainingError("validation loss became non-finite")
        trace.val_loss.append(val)
    trace.omega = omega
    return trace


# ----------------------------------------------------------------- analysis

def lipschitz_constants(inst, omega_samples, xprime_samples):
    """Empirical constants (c, gamma, eta) of the equilibrium-map Lipschitz bound.

    ``c`` is half the smallest magnitude of the least-negative Hessian
    eigenvalue over the samples, ``gamma`` the largest spectral norm of the
    mixed Hessian plus one, and ``eta = gamma / c``. For a linear classifier
    neither Hessian depends on ``omega``, so ``omega_samples`` only need to
    be valid weight vectors.
    """
    require_smooth(inst)
    if len(omega_samples) == 0 or len(xprime_samples) == 0:
        raise UsageError("need at least one omega and one report sample")
    top = max(np.linalg.eigvalsh(potential_hessian(inst, xp))[-1] for xp in xprime_samples)
    if top >= 0:
        raise UsageError("sampled Hessian is not negative definite; no valid c")
    c = 0.5 * abs(top)
    gamma = max(np.linalg.norm(cross_hessian(inst, xp, w), 2)
                for xp in xprime_samples[:1] for w in omega_samples) + 1.0
    return c, gamma, gamma / c


def sample_complexity(eps, gamma, d, lipschitz, eta, r):
    """Number of samples required by the generalisation bound.

    n = ceil( 8/eps^2 * [ ln(e/gamma) + d ln(16 lipschitz (d + eta r) gamma / eps) ] ),
    clamped below at 1.
    """
    for name, val in (("eps", eps), ("gamma", gamma), ("d", d), ("lipschitz", lipschitz),
                      ("eta", eta), ("r", r)):
        if not val > 0:
            raise UsageError(f"{name} must be positive")
    if not eps < 1:
        raise UsageError("eps must be below 1")
    a1 = math.e / gamma
    a2 = 16 * lipschitz * (d + eta * r) * gamma / eps
    if a1 <= 0 or a2 <= 0:
        raise UsageError("logarithm argument is not positive")
    n = 8.0 / eps**2 * (math.log(a1) + d * math.log(a2))
    return max(1, math.ceil(n))


def _peer_externality(model, x_i, xr_i, X_peers, Xr_peers):
    u_i = xr_i - x_i
    U = Xr_peers - X_peers
    c = model.scale
    if model.variant is Externality.CONVEX_SQUARE_SUM:
        return float(c * np.sum((np.linalg.norm(u_i) + np.linalg.norm(U, axis=1)) ** 2))
    if model.variant is Externality.PROPORTIONAL:
        return float(c * np.sum(u_i**2 * U**2))
    return float(c * np.sum(np.exp(-((xr_i - Xr_peers) ** 2))))


def externality_peer_gradient(model, x_i, xr_i, X_peers, Xr_peers):
    """Gradient of agent i's total externality in the peers' true features."""
    u_i = xr_i - x_i
    U = Xr_peers - X_peers
    c = model.scale
    if model.variant is Externality.CONVEX_SQUARE_SUM:
        n = np.linalg.norm(U, axis=1)
        unit = np.divide(U, n[:, None], out=np.zeros_like(U), where=n[:, None] > 0)
        return -2 * c * (np.linalg.norm(u_i) + n)[:, None] * unit
    if model.variant is Externality.PROPORTIONAL:
        return -2 * c * u_i[None, :] ** 2 * U
    return np.zeros_like(U)


def estimate_externality_lipschitz(model, d, n_samples=10_000, rng=None, margin=0.0, safety=1.5):
    """Sampled bound on how fast total externality moves with the peers' true features."""
    rng = rng or np.random.default_rng(0)
    if model.k < 2 or model.beta == 0:
        return 0.0
    p = model.k - 1
    best = 0.0
    for _ in range(n_samples):
        x_i, xr_i = rng.uniform(0, 1, d), rng.uniform(0, 1, d)
        Xp = rng.uniform(-margin, 1 + margin, (p, d))
        Xrp = rng.uniform(0, 1, (p, d))
        best = max(best, np.linalg.norm(externality_peer_gradient(model, x_i, xr_i, Xp, Xrp)))
    return safety * best


@dataclass(frozen=True)
class ImperfectInfoReport:
    gains: np.ndarray      # best sampled improvement per agent
    bounds: np.ndarray     # 2 * lambda_ext * |b_i| per agent
    max_gain: float
    satisfied: bool


def biased_utility(inst, i, x_rep_i, X_rep, omega, peer_bias):
    """Agent i's utility when it sees its peers' true features shifted by ``-peer_bias``."""
    peers = [j for j in range(inst.k) if j != i]
    X = inst.features
    x_i = X[i]
    X_hat = X[peers] - peer_bias
    ext = _peer_externality(inst.externality, x_i, x_rep_i, X_hat, np.asarray(X_rep)[peers]) \
        if peers and inst.externality.beta > 0 else 0.0
    return score(omega, x_rep_i) * inst.gain(x_i) - cost(inst.cost, x_i, x_rep_i) - ext


def imperfect_info_check(inst, omega, eq, biases, lambda_ext, n_deviations=1000, rng=None,
                         slack=1e-6):
    """Largest improvement in biased utility available at the complete-information equilibrium.

    ``biases`` has shape (k, k - 1, d): row i is the error in agent i's
    estimate of its peers' features.
    """
    rng = rng or np.random.default_rng(0)
    X_rep = eq.active_reports
    k, d = inst.k, inst.d
    biases = np.asarray(biases, dtype=float).reshape(k, max(k - 1, 0), d)
    gains, bounds = np.zeros(k), np.zeros(k)
    for i in range(k):
        base = biased_utility(inst, i, X_rep[i], X_rep, omega, biases[i])
        devs = rng.uniform(0, 1, (n_deviations, d))
        gains[i] = max(biased_utility(inst, i, x, X_rep, omega, biases[i]) for x in devs) - base
        bounds[i] = 2 * lambda_ext * np.linalg.norm(biases[i])
    return ImperfectInfoReport(gains, bounds, float(gains.max()),
                               bool(np.all(gains <= bounds + slack)))


def smooth_instance_for_lipschitz(game, k_max, d, rng):
    """Random instance at full participation, used as the template for the constants."""
    X = rng.uniform(0, 1, (k_max, d))
    return game.instance(X, np.ones(k_max, dtype=int), k_max)


def with_solver(cfg, **changes):
    return replace(cfg, solver=replace(cfg.solver, **changes))
