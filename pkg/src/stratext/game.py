"""Data model of the manipulation game and the potential that describes it.

Agents report ``x'`` in the unit box, earn ``<x', w> * gain``, pay a quadratic
manipulation cost and suffer a symmetric pairwise externality from every other
active agent. All array arguments follow the ``(k_max, d)`` layout; only the
first ``k`` (active) rows are ever read.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, UnsupportedConfigurationError, UsageError


class Externality(str, enum.Enum):
    CONVEX_SQUARE_SUM = "convex_square_sum"
    PROPORTIONAL = "proportional"
    CONGESTION = "congestion"


SMOOTH_VARIANTS = (Externality.PROPORTIONAL, Externality.CONGESTION)


class OutOfRangeWarning(UserWarning):
    """beta lies outside the range where strict concavity is guaranteed."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ClassifierParams:
    omega: np.ndarray
    norm_budget: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(np.atleast_1d(self.omega)))
        if self.omega.ndim != 1:
            raise UsageError("omega must be a vector")
        if not self.norm_budget > 0:
            raise ConfigurationError("norm_budget must be positive", key="norm_budget")
        if np.linalg.norm(self.omega) > self.norm_budget * (1 + 1e-12):
            raise ConfigurationError("||omega|| exceeds the norm budget", key="omega")

    @classmethod
    def projected(cls, omega, norm_budget):
        """Build from ``omega`` after projecting it onto the norm ball."""
        return cls(project_to_ball(omega, norm_budget), norm_budget)


def project_to_ball(omega, radius):
    omega = np.asarray(omega, dtype=float)
    n = np.linalg.norm(omega)
    if n > radius:
        return omega * (radius / n)
    return omega.copy()


def _weights(omega):
    if isinstance(omega, ClassifierParams):
        return omega.omega
    return np.atleast_1d(np.asarray(omega, dtype=float))


@dataclass(frozen=True)
class CostModel:
    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive", key="alpha")


@dataclass(frozen=True)
class ExternalityModel:
    variant: Externality = Externality.CONVEX_SQUARE_SUM
    beta: float = 0.0
    k: int = 2

    def __post_init__(self):
        object.__setattr__(self, "variant", Externality(self.variant))
        if not self.beta >= 0:
            raise ConfigurationError("beta must be nonnegative", key="beta")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigurationError("active count k must be a positive integer", key="k")

    @property
    def scale(self):
        """Per-pair factor beta / (k - 1); zero when there are no peers."""
        if self.k < 2:
            return 0.0
        return self.beta / (self.k - 1)

    @property
    def is_smooth(self):
        return self.variant in SMOOTH_VARIANTS or self.beta == 0 or self.k < 2

    def beta_threshold(self, alpha):
        """Largest beta (exclusive) for which strict concavity is guaranteed.

        Proportional: the per-pair reduction gives beta < alpha. Congestion:
        the potential's Hessian is -2 alpha I - beta/(k-1) L with L a
        weighted Laplacian whose weights are at least -2 (all reports equal),
        so concavity holds exactly for beta < alpha (k - 1) / k; the per-pair
        reduction gives the k-free sufficient bound alpha / 2.
        """
        if self.variant is Externality.PROPORTIONAL:
            return alpha
        if self.variant is Externality.CONGESTION:
            return alpha * (self.k - 1) / self.k if self.k > 1 else np.inf
        return np.inf

    def in_range(self, alpha):
        return self.beta < self.beta_threshold(alpha)


@dataclass(frozen=True)
class ConstantGain:
    value: float = 1.0

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigurationError("gain must be positive", key="gain")

    def __call__(self, x):
        return self.value

    def values(self, X):
        return np.full(len(X), self.value)


@dataclass(frozen=True)
class GameInstance:
    features: np.ndarray
    labels: np.ndarray
    k: int
    cost: CostModel = field(default_factory=CostModel)
    externality: ExternalityModel = field(default_factory=ExternalityModel)
    gain: ConstantGain = field(default_factory=ConstantGain)

    def __post_init__(self):
        X = _frozen(np.atleast_2d(self.features))
        y = _frozen(np.atleast_1d(self.labels), dtype=int)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ConfigurationError("features must be a non-empty (k_max, d) matrix", key="features")
        if np.any(X < 0) or np.any(X > 1) or not np.all(np.isfinite(X)):
            raise ConfigurationError("features must lie in [0, 1]", key="features")
        if y.shape != (X.shape[0],):
            raise ConfigurationError("labels must have one entry per feature row", key="labels")
        if not np.all(np.isin(y, (-1, 1))):
            raise ConfigurationError("labels must be -1 or +1", key="labels")
        if not 1 <= self.k <= X.shape[0]:
            raise ConfigurationError("k must lie in [1, k_max]", key="k")
        if self.externality.k != self.k:
            raise ConfigurationError("externality.k must equal the active count", key="k")
        if not self.externality.in_range(self.cost.alpha):
            warnings.warn(
                f"beta={self.externality.beta} is outside the guaranteed concavity range "
                f"for {self.externality.variant.value}",
                OutOfRangeWarning,
                stacklevel=3,
            )

    @classmethod
    def build(cls, features, labels=None, k=None, alpha=1.0, beta=0.0,
              variant=Externality.CONVEX_SQUARE_SUM, gain=1.0):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        if labels is None:
            labels = np.ones(len(features), dtype=int)
        k = len(features) if k is None else k
        return cls(features, labels, k, CostModel(alpha),
                   ExternalityModel(variant, beta, k), ConstantGain(gain))

    @property
    def k_max(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @property
    def beta_in_range(self):
        return self.externality.in_range(self.cost.alpha)

    @property
    def active_features(self):
        return self.features[: self.k]

    def with_beta(self, beta):
        """Copy with a different externality strength (``beta=0`` gives the cost-only game)."""
        ext = replace(self.externality, beta=beta)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfRangeWarning)
            return replace(self, externality=ext)

    def permuted(self, order):
        """Copy with the active agents reordered by ``order`` (a permutation of range(k))."""
        order = np.asarray(order)
        idx = np.concatenate([order, np.arange(self.k, self.k_max)])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfRangeWarning)
            return replace(self, features=self.features[idx], labels=self.labels[idx])


def _active(inst, X_rep):
    X_rep = np.atleast_2d(np.asarray(X_rep, dtype=float))
    if X_rep.shape[1] != inst.d or X_rep.shape[0] < inst.k:
        raise UsageError(f"reports of shape {X_rep.shape} do not cover k={inst.k}, d={inst.d}")
    return X_rep[: inst.k]


# ---------------------------------------------------------------- scalar pieces

def score(omega, x_report):
    w = _weights(omega)
    x = np.asarray(x_report, dtype=float)
    if x.shape != w.shape:
        raise UsageError(f"dimension mismatch: omega {w.shape} vs x {x.shape}")
    return float(x @ w)


def cost(cost_model, x_true, x_report):
    x = np.asarray(x_true, dtype=float)
    xr = np.asarray(x_report, dtype=float)
    if x.shape != xr.shape:
        raise UsageError("dimension mismatch between true and reported features")
    diff = x - xr
    return float(cost_model.alpha * (diff @ diff))


def pairwise_externality(model, x_i, x_i_rep, x_j, x_j_rep):
    """Externality between two agents, already scaled by beta / (k - 1)."""
    if model.beta == 0:
        return 0.0
    if model.k < 2:
        raise ConfigurationError("pairwise externality needs k >= 2 when beta > 0", key="k")
    x_i, x_i_rep, x_j, x_j_rep = (np.asarray(a, dtype=float) for a in (x_i, x_i_rep, x_j, x_j_rep))
    if not (x_i.shape == x_i_rep.shape == x_j.shape == x_j_rep.shape):
        raise UsageError("dimension mismatch in pairwise externality")
    c = model.scale
    u_i = x_i_rep - x_i
    u_j = x_j_rep - x_j
    if model.variant is Externality.CONVEX_SQUARE_SUM:
        return float(c * (np.linalg.norm(u_i) + np.linalg.norm(u_j)) ** 2)
    if model.variant is Externality.PROPORTIONAL:
        return float(c * np.sum(u_i**2 * u_j**2))
    return float(c * np.sum(np.exp(-((x_i_rep - x_j_rep) ** 2))))


def total_externality(model, i, X, X_rep, k=None):
    k = model.k if k is None else k
    if not 0 <= i < k:
        raise UsageError(f"agent index {i} outside active range [0, {k})")
    if k == 1 or model.beta == 0:
        return 0.0
    return sum(pairwise_externality(model, X[i], X_rep[i], X[j], X_rep[j])
               for j in range(k) if j != i)


def agent_utility(inst, i, X_rep, omega):
    if not 0 <= i < inst.k:
        raise UsageError(f"agent index {i} outside active range [0, {inst.k})")
    X = inst.features
    X_rep = np.asarray(X_rep, dtype=float)
    return (score(omega, X_rep[i]) * inst.gain(X[i])
            - cost(inst.cost, X[i], X_rep[i])
            - total_externality(inst.externality, i, X, X_rep, inst.k))


# ------------------------------------------------------------- vectorised core

def pair_matrix(inst, X_rep):
    """k x k matrix of pairwise externalities (diagonal meaningless, set to 0)."""
    Xr = _active(inst, X_rep)
    k = inst.k
    P = _pair_matrix_batch(inst.externality, inst.active_features[None], Xr[None])[0]
    P[np.arange(k), np.arange(k)] = 0.0
    return P


def _pair_matrix_batch(model, X, Xr):
    # X, Xr: (N, k, d) -> (N, k, k)
    c = model.scale
    U = Xr - X
    if model.variant is Externality.CONVEX_SQUARE_SUM:
        n = np.linalg.norm(U, axis=2)
        return c * (n[:, :, None] + n[:, None, :]) ** 2
    if model.variant is Externality.PROPORTIONAL:
        U2 = U**2
        return c * np.einsum("nil,njl->nij", U2, U2)
    D = Xr[:, :, None, :] - Xr[:, None, :, :]
    return c * np.exp(-(D**2)).sum(axis=3)


def potential_batch(inst, X_reps, omega):
    """Potential for a stack of report profiles of shape (N, k, d)."""
    w = _weights(omega)
    Xr = np.asarray(X_reps, dtype=float)
    X = inst.active_features[None]
    g = inst.gain.values(inst.active_features)
    U = Xr - X
    val = np.einsum("nid,d,i->n", Xr, w, g) - inst.cost.alpha * np.einsum("nid,nid->n", U, U)
    if inst.k > 1 and inst.externality.beta > 0:
        P = _pair_matrix_batch(inst.externality, X, Xr)
        val -= np.triu(P, 1).sum(axis=(1, 2))
    return val


def potential(inst, X_rep, omega):
    return float(potential_batch(inst, _active(inst, X_rep)[None], omega)[0])


def manipulation_norms(inst, X_rep):
    return np.linalg.norm(_active(inst, X_rep) - inst.active_features, axis=1)


def _externality_gradient(inst, Xr):
    """Gradient of sum_{i<j} t_ij with respect to the reports (k x d)."""
    model = inst.externality
    U = Xr - inst.active_features
    if inst.k < 2 or model.beta == 0:
        return np.zeros_like(U)
    c = model.scale
    if model.variant is Externality.CONVEX_SQUARE_SUM:
        n = np.linalg.norm(U, axis=1)
        unit = np.divide(U, n[:, None], out=np.zeros_like(U), where=n[:, None] > 0)
        # sum_{i<j} (n_i + n_j)^2 = (k - 2) sum n_i^2 + (sum n_i)^2
        return 2 * c * (inst.k - 2) * U + 2 * c * n.sum() * unit
    if model.variant is Externality.PROPORTIONAL:
        U2 = U**2
        return 2 * c * U * (U2.sum(axis=0) - U2)
    D = Xr[:, None, :] - Xr[None, :, :]
    return -2 * c * (D * np.exp(-(D**2))).sum(axis=1)


def potential_gradient(inst, X_rep, omega):
    """Analytic gradient of the potential in the active reports, shape (k, d).

    For the convex square-sum externality the norm term has a kink at zero
    manipulation; there its contribution is taken to be 0.
    """
    Xr = _active(inst, X_rep)
    w = _weights(omega)
    g = inst.gain.values(inst.active_features)
    U = Xr - inst.active_features
    return g[:, None] * w[None, :] - 2 * inst.cost.alpha * U - _externality_gradient(inst, Xr)


def _externality_hessian(inst, Xr, allow_kink=False):
    model = inst.externality
    k, d = inst.k, inst.d
    kd = k * d
    if k < 2 or model.beta == 0:
        return np.zeros((kd, kd))
    c = model.scale
    U = Xr - inst.active_features
    H = np.zeros((k, d, k, d))
    if model.variant is Externality.PROPORTIONAL:
        U2 = U**2
        others = U2.sum(axis=0) - U2
        cross = 4 * c * np.einsum("il,jl->ilj", U, U)  # (i, l, j)
        for l in range(d):
            H[:, l, :, l] = cross[:, l, :]
        idx = np.arange(k)
        for l in range(d):
            H[idx, l, idx, l] = 2 * c * others[:, l]
    elif model.variant is Externality.CONGESTION:
        D = Xr[:, None, :] - Xr[None, :, :]
        W = (4 * D**2 - 2) * np.exp(-(D**2))  # (i, j, l)
        idx = np.arange(k)
        for l in range(d):
            H[:, l, :, l] = -c * W[:, :, l]
            H[idx, l, idx, l] = c * (W[:, :, l].sum(axis=1) - W[idx, idx, l])
    else:
        n = np.linalg.norm(U, axis=1)
        kink = n == 0
        if kink.any() and not allow_kink:
            raise UnsupportedConfigurationError(
                "convex square-sum externality is not twice differentiable at zero manipulation")
        unit = np.divide(U, n[:, None], out=np.zeros_like(U), where=~kink[:, None])
        S = n.sum()
        eye = np.eye(d)
        H += 2 * c * np.einsum("il,jm->iljm", unit, unit)
        for i in range(k):
            block = 2 * c * (k - 2) * eye
            if not kink[i]:
                block = block + 2 * c * S * (eye - np.outer(unit[i], unit[i])) / n[i]
            H[i, :, i, :] += block
    return H.reshape(kd, kd)


def potential_hessian(inst, X_rep, omega=None):
    """Hessian of the potential in the flattened active reports (row-major, agent-major)."""
    Xr = _active(inst, X_rep)
    kd = inst.k * inst.d
    return -2 * inst.cost.alpha * np.eye(kd) - _externality_hessian(inst, Xr)


def cross_hessian(inst, X_rep=None, omega=None):
    """Mixed second derivative d^2 Phi / (d x' d omega), shape (k*d, d)."""
    g = inst.gain.values(inst.active_features)
    return np.kron(g[:, None], np.eye(inst.d))


# --------------------------------------------------------- convexity thresholds

def pair_impact_hessian(variant, alpha, beta, u_i, u_j):
    """2x2 Hessian of one per-pair summand of the cumulative impact, times (k - 1).

    For the proportional and square-sum models ``u_i, u_j`` are the two
    manipulations of one feature; for congestion only ``u_i - u_j`` (the gap
    between the two reports) matters.
    """
    variant = Externality(variant)
    if variant is Externality.PROPORTIONAL:
        return np.array([[2 * alpha + 2 * beta * u_j**2, 4 * beta * u_i * u_j],
                         [4 * beta * u_i * u_j, 2 * alpha + 2 * beta * u_i**2]])
    if variant is Externality.CONGESTION:
        # second derivative of beta exp(-gap^2) is beta w in both reports, -beta w across
        gap = u_i - u_j
        w = 2 * np.exp(-gap**2) * (2 * gap**2 - 1)
        return np.array([[2 * alpha + beta * w, -beta * w],
                         [-beta * w, 2 * alpha + beta * w]])
    # alpha (u_i^2 + u_j^2) + beta (|u_i| + |u_j|)^2, away from the kinks
    s = np.sign(u_i) * np.sign(u_j)
    return np.array([[2 * alpha + 2 * beta, 2 * beta * s],
                     [2 * beta * s, 2 * alpha + 2 * beta]])


@dataclass(frozen=True)
class ConvexityReport:
    min_determinant: float
    min_leading_minor: float
    min_eigenvalue: float
    is_strictly_convex_on_samples: bool


def check_convexity_threshold(model, cost_model, n_samples, rng_seed=0):
    """Sample per-pair Hessians of the cumulative impact and report their minima."""
    if n_samples < 1:
        raise UsageError("n_samples must be at least 1")
    rng = np.random.default_rng(rng_seed)
    x = rng.uniform(0, 1, size=(n_samples, 4))
    if model.variant is Externality.CONGESTION:
        u_i, u_j = x[:, 2], x[:, 3]  # reports; only their gap enters
    else:
        u_i, u_j = x[:, 2] - x[:, 0], x[:, 3] - x[:, 1]
    dets, minors, eigs = [], [], []
    for a, b in zip(u_i, u_j):
        H = pair_impact_hessian(model.variant, cost_model.alpha, model.beta, a, b)
        dets.append(H[0, 0] * H[1, 1] - H[0, 1] * H[1, 0])
        minors.append(H[0, 0])
        eigs.append(np.linalg.eigvalsh(H)[0])
    report = ConvexityReport(float(min(dets)), float(min(minors)), float(min(eigs)), False)
    return replace(report, is_strictly_convex_on_samples=bool(
        report.min_determinant > 0 and report.min_leading_minor > 0))
