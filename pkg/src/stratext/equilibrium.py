"""Computing and certifying the pure Nash equilibrium.

The equilibrium is the maximiser of the potential over the report box. Smooth
externalities are handled by projected gradient ascent; the convex square-sum
externality, whose potential has a kink wherever an agent does not manipulate,
is solved exactly through its aggregate-norm structure.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import ConvergenceError, ModelViolationError, UsageError
from .game import (Externality, _active, _weights, agent_utility, potential, potential_hessian,
                   potential_batch, potential_gradient)

_RTOL = 4 * np.finfo(float).eps


@dataclass(frozen=True)
class FixedStep:
    step: float = 0.1


@dataclass(frozen=True)
class Backtracking:
    shrink: float = 0.5
    sufficient_increase: float = 1e-4
    initial_step: float = 1.0


@dataclass(frozen=True)
class SolverConfig:
    kkt_tolerance: float = 1e-8
    max_iterations: int = 10_000
    step_rule: object = field(default_factory=Backtracking)
    multistart_count: int = 1
    multistart_seed: int = 0

    def __post_init__(self):
        if not self.kkt_tolerance > 0:
            raise UsageError("kkt_tolerance must be positive")
        if self.max_iterations < 1:
            raise UsageError("max_iterations must be at least 1")
        if self.multistart_count < 1:
            raise UsageError("multistart_count must be at least 1")


@dataclass(frozen=True)
class EquilibriumResult:
    reports: np.ndarray          # (k_max, d); inactive rows equal the true features
    dual_upper: np.ndarray       # (k, d)
    dual_lower: np.ndarray       # (k, d)
    kkt_residual: float
    iterations: int
    converged: bool
    unique: Optional[bool] = None
    potential: float = float("nan")
    start_spread: float = 0.0

    @property
    def active_reports(self):
        return self.reports[: self.dual_upper.shape[0]]


class PneCheck(NamedTuple):
    is_equilibrium: bool
    agent: int
    gain: float


def _uses_norm_solver(inst):
    return (inst.externality.variant is Externality.CONVEX_SQUARE_SUM
            and inst.externality.beta > 0 and inst.k > 1)


# ------------------------------------------------------------ KKT bookkeeping

def _projected(grad, x):
    """Component of ``grad`` that is not absorbed by an active bound."""
    r = grad.copy()
    upper = x >= 1.0
    lower = x <= 0.0
    r[upper] = np.minimum(grad[upper], 0.0)
    r[lower] = np.maximum(grad[lower], 0.0)
    return r


def _kink_free_gradient(inst, X_rep, omega):
    """Potential gradient with the square-sum kink resolved by the best supergradient.

    At an agent with zero manipulation the superdifferential is
    ``v - rho * B`` (``B`` the unit ball); we pick the element that leaves the
    smallest projected residual.
    """
    Xr = _active(inst, X_rep)
    grad = potential_gradient(inst, Xr, omega)
    if not _uses_norm_solver(inst):
        return grad
    n = np.linalg.norm(Xr - inst.active_features, axis=1)
    rho = 2 * inst.externality.scale * n.sum()
    for i in np.flatnonzero(n == 0):
        r = _projected(grad[i], Xr[i])
        rn = np.linalg.norm(r)
        if rn > 0:
            grad[i] = grad[i] - r * min(1.0, rho / rn)
    return grad


def recover_duals(inst, omega, X_candidate):
    """Bound multipliers implied by the gradient at a feasible candidate."""
    Xr = _active(inst, X_candidate)
    grad = _kink_free_gradient(inst, Xr, omega)
    lam = np.where(Xr >= 1.0, np.maximum(grad, 0.0), 0.0)
    mu = np.where(Xr <= 0.0, np.maximum(-grad, 0.0), 0.0)
    return lam, mu


def kkt_residual(inst, omega, X_candidate):
    """Max violation of stationarity, feasibility and complementary slackness."""
    Xr = _active(inst, X_candidate)
    grad = _kink_free_gradient(inst, Xr, omega)
    lam, mu = recover_duals(inst, omega, Xr)
    stationarity = np.abs(grad - lam + mu).max()
    feasibility = max(0.0, (Xr - 1).max(), (-Xr).max())
    slackness = max((lam * (1 - Xr)).max(), (mu * Xr).max())
    return float(max(stationarity, feasibility, slackness))


# ------------------------------------------------- projected gradient ascent

def _ascent(f, grad, x0, cfg, what="equilibrium"):
    """Projected gradient ascent on the unit box for a concave ``f``.

    Returns ``(x, iterations, residual)``. Uses Barzilai-Borwein trial steps
    with Armijo backtracking, or a fixed step when configured.
    """
    rule = cfg.step_rule
    x = np.clip(np.asarray(x0, dtype=float), 0.0, 1.0)
    fx = f(x)
    g = grad(x)
    step = rule.initial_step if isinstance(rule, Backtracking) else rule.step
    x_prev = g_prev = None
    violations = 0
    for it in range(cfg.max_iterations + 1):
        res = np.abs(_projected(g, x)).max()
        if res <= cfg.kkt_tolerance:
            return x, it, float(res)
        if it == cfg.max_iterations:
            break
        if isinstance(rule, FixedStep):
            x = np.clip(x + rule.step * g, 0.0, 1.0)
            fx, g = f(x), grad(x)
            continue
        if x_prev is not None:
            s, y = x - x_prev, g - g_prev
            sy = -float(np.sum(s * y))
            if sy > 0:
                step = float(np.clip(np.sum(s * s) / sy, 1e-10, 1e10))
        while True:
            x_new = np.clip(x + step * g, 0.0, 1.0)
            delta = x_new - x
            lin = float(np.sum(g * delta))
            f_new = f(x_new)
            slack = 1e-14 * (1.0 + abs(fx))
            if f_new > fx + lin + 1e-9 * (1.0 + abs(fx)):
                violations += 1
                if violations > 5:
                    raise ModelViolationError(
                        f"{what}: potential rose above its linearisation; it is not concave here")
            if f_new >= fx + rule.sufficient_increase * lin or lin <= slack:
                break
            step *= rule.shrink
            if step < 1e-16:
                raise ModelViolationError(f"{what}: line search failed to find an ascent step")
        x_prev, g_prev = x, g
        x, fx, g = x_new, f_new, grad(x_new)
    raise ConvergenceError(f"{what}: no convergence in {cfg.max_iterations} iterations",
                           best=x, residual=float(res))


# ----------------------------------------------- square-sum exact machinery

def norm_penalized_box_max(v, kappa, rho, lo, hi):
    """Maximise ``v.u - kappa |u|^2 - rho |u|`` over ``lo <= u <= hi`` (``lo <= 0 <= hi``).

    For fixed ``s = |u|`` the problem separates into ``u = clip(v s / (2 kappa s + rho))``;
    the optimal ``s`` is the unique positive fixed point of that map, or zero
    when the projected gradient at the origin is no larger than ``rho``.
    """
    v = np.asarray(v, dtype=float)
    if rho <= 0:
        return np.clip(v / (2 * kappa), lo, hi)
    room = np.where(v > 0, hi, np.where(v < 0, -lo, 0.0))
    free = room > 0
    r = np.linalg.norm(v[free])
    if r <= rho:
        return np.zeros_like(v)

    def excess(s):
        return np.linalg.norm(np.clip(v * (s / (2 * kappa * s + rho)), lo, hi)) - s

    s_lo = 0.5 * min((r - rho) / (2 * kappa), np.min(room[free] * rho / np.abs(v[free])))
    s_hi = np.linalg.norm(np.maximum(-lo, hi)) * (1 + 1e-12) + 1e-300
    s = brentq(excess, s_lo, s_hi, xtol=1e-300, rtol=_RTOL, maxiter=500)
    return np.clip(v * (s / (2 * kappa * s + rho)), lo, hi)


def _solve_norm_coupled(inst, omega):
    """Exact equilibrium for the square-sum externality.

    The potential equals ``sum_i v_i.u_i - kappa sum_i |u_i|^2 - c (sum_i |u_i|)^2``
    with ``kappa = alpha + c (k - 2)``. Given the aggregate ``S = sum |u_i|`` each
    agent solves a norm-penalised box problem with ``rho = 2 c S``; the
    aggregate itself is the unique root of ``sum_i |u_i(S)| - S``.
    """
    X = inst.active_features
    v = inst.gain.values(X)[:, None] * _weights(omega)[None, :]
    c = inst.externality.scale
    kappa = inst.cost.alpha + c * (inst.k - 2)
    lo, hi = -X, 1.0 - X
    calls = [0]

    def profile(S):
        calls[0] += 1
        return np.array([norm_penalized_box_max(v[i], kappa, 2 * c * S, lo[i], hi[i])
                         for i in range(inst.k)])

    def gap(S):
        return np.linalg.norm(profile(S), axis=1).sum() - S

    S_hi = np.linalg.norm(np.maximum(X, 1 - X), axis=1).sum() + 1.0
    g0 = gap(0.0)
    S = 0.0 if g0 <= 0 else brentq(gap, 0.0, S_hi, xtol=1e-300, rtol=_RTOL, maxiter=500)
    U = profile(S)
    # a coordinate driven exactly onto the bound must land on it
    Xr = np.clip(X + U, 0.0, 1.0)
    Xr = np.where(np.abs(Xr - 1.0) < 1e-15, 1.0, np.where(Xr < 1e-15, 0.0, Xr))
    Xr[np.all(U == 0, axis=1)] = X[np.all(U == 0, axis=1)]
    return Xr, calls[0]


# ----------------------------------------------------------------- public API

def _random_starts(inst, cfg):
    rng = np.random.default_rng(cfg.multistart_seed)
    return [rng.uniform(0, 1, size=(inst.k, inst.d)) for _ in range(cfg.multistart_count - 1)]


def _finish(inst, omega, Xr, iterations, cfg, unique=None, spread=0.0):
    lam, mu = recover_duals(inst, omega, Xr)
    res = kkt_residual(inst, omega, Xr)
    full = np.array(inst.features, dtype=float)
    full[: inst.k] = Xr
    return EquilibriumResult(full, lam, mu, res, iterations, res <= cfg.kkt_tolerance,
                             unique, potential(inst, Xr, omega), spread)


def _require_local_concavity(inst, Xr):
    """Outside the guaranteed range a stationary point may be a saddle; refuse it."""
    top = np.linalg.eigvalsh(potential_hessian(inst, Xr))[-1]
    if top > 0:
        raise ModelViolationError(
            f"potential is not concave at the computed point (Hessian eigenvalue {top:.3g} > 0); "
            f"beta={inst.externality.beta} is outside the concavity range")


def solve_ne(inst, omega, cfg=None, start=None):
    """Unique pure Nash equilibrium of the agents' game under classifier ``omega``.

    With ``cfg.multistart_count > 1`` extra random starts are solved as well
    and ``unique`` records whether they all land within 1e-5 (Frobenius).
    """
    cfg = cfg or SolverConfig()
    k, d = inst.k, inst.d
    if _uses_norm_solver(inst):
        Xr, iterations = _solve_norm_coupled(inst, omega)
        others = [br_dynamics(inst, omega, s, cfg)[0] for s in _random_starts(inst, cfg)]
    else:
        def f(z):
            return float(potential_batch(inst, z.reshape(1, k, d), omega)[0])

        def grad(z):
            return potential_gradient(inst, z.reshape(k, d), omega).ravel()

        x0 = inst.active_features if start is None else _active(inst, start)
        try:
            z, iterations, _ = _ascent(f, grad, x0.ravel(), cfg)
        except ConvergenceError as exc:
            best = np.array(inst.features, dtype=float)
            best[:k] = exc.best.reshape(k, d)
            raise ConvergenceError(str(exc), best=best, residual=exc.residual) from None
        Xr = z.reshape(k, d)
        if not inst.beta_in_range:
            _require_local_concavity(inst, Xr)
        others = [_ascent(f, grad, s.ravel(), cfg)[0].reshape(k, d) for s in _random_starts(inst, cfg)]
    unique, spread = None, 0.0
    if others:
        spread = max(np.linalg.norm(o[:k] - Xr) for o in others)
        unique = bool(spread <= 1e-5)
    return _finish(inst, omega, Xr, iterations, cfg, unique, float(spread))


def best_response(inst, i, X_rep, omega, cfg=None):
    """Agent ``i``'s utility-maximising report with every other report held fixed."""
    cfg = cfg or SolverConfig()
    if not 0 <= i < inst.k:
        raise UsageError(f"agent index {i} outside active range [0, {inst.k})")
    Xr = np.array(_active(inst, X_rep), dtype=float)
    x_i = inst.active_features[i]
    if _uses_norm_solver(inst):
        c = inst.externality.scale
        n = np.linalg.norm(Xr - inst.active_features, axis=1)
        rho = 2 * c * (n.sum() - n[i])
        v = inst.gain(x_i) * _weights(omega)
        u = norm_penalized_box_max(v, inst.cost.alpha + inst.externality.beta, rho, -x_i, 1 - x_i)
        out = np.clip(x_i + u, 0.0, 1.0)
        return np.where(u == 0, x_i, out)

    def f(z):
        Xr[i] = z
        return potential(inst, Xr, omega)

    def grad(z):
        Xr[i] = z
        return potential_gradient(inst, Xr, omega)[i]

    z, _, _ = _ascent(f, grad, Xr[i].copy(), cfg, what=f"best response of agent {i}")
    return z


def br_dynamics(inst, omega, X_start, cfg=None):
    """Round-robin best responses until a sweep moves no agent by more than the tolerance.

    Returns the final (k, d) reports and the potential after every move,
    starting with the potential of ``X_start``.
    """
    cfg = cfg or SolverConfig()
    Xr = np.array(np.clip(_active(inst, X_start), 0, 1), dtype=float)
    trace = [potential(inst, Xr, omega)]
    for _ in range(cfg.max_iterations):
        moved = False
        for i in range(inst.k):
            new = best_response(inst, i, Xr, omega, cfg)
            if np.abs(new - Xr[i]).max() > cfg.kkt_tolerance:
                Xr[i] = new
                trace.append(potential(inst, Xr, omega))
                moved = True
        if not moved:
            return Xr, np.array(trace)
    raise ConvergenceError("best-response dynamics did not settle", best=Xr)


def verify_pne(inst, omega, X_candidate, eps=1e-6, cfg=None):
    """Check that no active agent can gain more than ``eps`` by deviating alone."""
    cfg = cfg or SolverConfig(kkt_tolerance=1e-11)
    Xr = np.array(_active(inst, X_candidate), dtype=float)
    worst = PneCheck(True, -1, -np.inf)
    for i in range(inst.k):
        dev = Xr.copy()
        dev[i] = best_response(inst, i, Xr, omega, cfg)
        gain = agent_utility(inst, i, dev, omega) - agent_utility(inst, i, Xr, omega)
        if gain > worst.gain:
            worst = PneCheck(True, i, float(gain))
    return worst._replace(is_equilibrium=bool(worst.gain <= eps))


def brute_force_ne(inst, omega, grid_resolution, max_evaluations=20_000_000, chunk=200_000):
    """Grid point maximising the potential; an oracle for tiny games."""
    kd = inst.k * inst.d
    if kd > 6:
        raise UsageError("brute force is limited to k*d <= 6")
    n = int(round(1.0 / grid_resolution)) + 1
    if n ** kd > max_evaluations:
        raise UsageError(f"grid of {n}^{kd} points exceeds the evaluation budget")
    axis = np.linspace(0.0, 1.0, n)
    total = n ** kd
    best_val, best = -np.inf, None
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), (n,) * kd)
        Z = axis[np.stack(idx, axis=1)].reshape(-1, inst.k, inst.d)
        vals = potential_batch(inst, Z, omega)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best = vals[j], Z[j]
    full = np.array(inst.features, dtype=float)
    full[: inst.k] = best
    return full
