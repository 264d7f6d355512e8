"""Derivatives of the equilibrium map and of the strategic loss.

The equilibrium solves a box-constrained concave program, so away from
strict-complementarity failures its Jacobian follows from the stationarity
conditions on the free (interior) coordinates:

    H_FF J_F = -C_F,   J_clamped = 0.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .equilibrium import SolverConfig, _projected, _uses_norm_solver, solve_ne
from .errors import NumericalError, UnsupportedConfigurationError
from .game import _externality_hessian, _weights, cross_hessian


class DegenerateJacobianWarning(UserWarning):
    """Strict complementarity failed; a finite-difference Jacobian was used instead."""


class Loss(str, enum.Enum):
    LOGISTIC = "logistic"
    HINGE = "hinge"

    def value_of(self, z, y):
        z = np.asarray(z, dtype=float)
        m = y * z
        if self is Loss.LOGISTIC:
            return np.logaddexp(0.0, -m)
        return np.maximum(0.0, 1.0 - m)

    def derivative(self, z, y):
        """d loss / d score; bounded by 1 in absolute value for both losses."""
        z = np.asarray(z, dtype=float)
        m = y * z
        if self is Loss.LOGISTIC:
            return -y * np.exp(-np.logaddexp(0.0, m))
        return np.where(m < 1.0, -y, 0.0) * np.ones_like(z)

    @property
    def lipschitz(self):
        return 1.0


@dataclass(frozen=True)
class NeJacobian:
    matrix: np.ndarray            # (k*d, d); NaN rows at degenerate coordinates
    degenerate_coords: tuple
    clamped_coords: tuple

    @property
    def valid(self):
        return not self.degenerate_coords


def _classify(inst, omega, eq, dual_tolerance):
    """Split flattened coordinates into free, clamped and degenerate."""
    Xr = eq.active_reports
    lam = eq.dual_upper.ravel()
    mu = eq.dual_lower.ravel()
    x = Xr.ravel()
    upper, lower = x >= 1.0, x <= 0.0
    clamped = (upper & (lam > dual_tolerance)) | (lower & (mu > dual_tolerance))
    degenerate = (upper & (lam <= dual_tolerance)) | (lower & (mu <= dual_tolerance))
    if _uses_norm_solver(inst):
        # an agent resting on the kink behaves like a clamped block; its
        # margin (rho - |projected v|) plays the role of the dual
        d = inst.d
        U = Xr - inst.active_features
        n = np.linalg.norm(U, axis=1)
        rho = 2 * inst.externality.scale * n.sum()
        v = inst.gain.values(inst.active_features)[:, None] * _weights(omega)[None, :]
        for i in np.flatnonzero(n == 0):
            block = slice(i * d, (i + 1) * d)
            margin = rho - np.linalg.norm(_projected(v[i], Xr[i]))
            clamped[block] = margin > dual_tolerance
            degenerate[block] = margin <= dual_tolerance
    free = ~(clamped | degenerate)
    return free, clamped, degenerate


def ne_jacobian(inst, omega, eq, dual_tolerance=None, cfg=None):
    """Jacobian of the flattened equilibrium reports with respect to ``omega``."""
    if not eq.converged:
        raise NumericalError("equilibrium did not converge; cannot differentiate")
    cfg = cfg or SolverConfig()
    dual_tolerance = 10 * cfg.kkt_tolerance if dual_tolerance is None else dual_tolerance
    free, clamped, degenerate = _classify(inst, omega, eq, dual_tolerance)
    kd, d = inst.k * inst.d, inst.d
    J = np.zeros((kd, d))
    if free.any():
        H = -2 * inst.cost.alpha * np.eye(kd) - _externality_hessian(
            inst, eq.active_reports, allow_kink=True)
        C = cross_hessian(inst)
        try:
            J[free] = np.linalg.solve(H[np.ix_(free, free)], -C[free])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"free-block Hessian is singular: {exc}") from None
        if not np.all(np.isfinite(J)):
            raise NumericalError("non-finite Jacobian entries")
    J[degenerate] = np.nan
    return NeJacobian(J, tuple(np.flatnonzero(degenerate).tolist()),
                      tuple(np.flatnonzero(clamped).tolist()))


def fd_jacobian(inst, omega, h=1e-5, cfg=None, scheme="central"):
    """Finite-difference Jacobian of the equilibrium map, one weight at a time."""
    cfg = cfg or SolverConfig(kkt_tolerance=1e-13)
    w = np.array(_weights(omega), dtype=float)
    k = inst.k

    def ne(wv):
        return solve_ne(inst, wv, cfg).active_reports.ravel()

    base = ne(w) if scheme == "forward" else None
    cols = []
    for m in range(inst.d):
        e = np.zeros_like(w)
        e[m] = h
        if scheme == "forward":
            cols.append((ne(w + e) - base) / h)
        else:
            cols.append((ne(w + e) - ne(w - e)) / (2 * h))
    return np.stack(cols, axis=1).reshape(k * inst.d, inst.d)


def _strategic_loss_and_gradient(inst, omega, loss, cfg=None, eq=None):
    cfg = cfg or SolverConfig()
    w = np.array(_weights(omega), dtype=float)
    if eq is None:
        eq = solve_ne(inst, w, cfg)
    jac = ne_jacobian(inst, w, eq, cfg=cfg)
    J = jac.matrix
    if not jac.valid:
        warnings.warn("strict complementarity fails at this equilibrium; "
                      "using a one-sided finite-difference Jacobian", DegenerateJacobianWarning,
                      stacklevel=3)
        J = fd_jacobian(inst, w, h=1e-6, cfg=SolverConfig(kkt_tolerance=1e-13), scheme="forward")
    k, d = inst.k, inst.d
    V = eq.active_reports
    y = inst.labels[:k]
    z = V @ w
    dl = loss.derivative(z, y)
    blocks = J.reshape(k, d, d)
    per_agent = np.einsum("l,ilm->im", w, blocks) + V
    grad = (dl[:, None] * per_agent).mean(axis=0)
    return float(loss.value_of(z, y).mean()), grad


def loss_gradient(inst, omega, loss=Loss.LOGISTIC, cfg=None, eq=None):
    """Gradient in ``omega`` of the average loss on equilibrium scores."""
    return _strategic_loss_and_gradient(inst, omega, Loss(loss), cfg, eq)[1]


def strategic_loss(inst, omega, loss=Loss.LOGISTIC, cfg=None):
    eq = solve_ne(inst, omega, cfg or SolverConfig())
    V = eq.active_reports
    return float(Loss(loss).value_of(V @ _weights(omega), inst.labels[: inst.k]).mean())


def require_smooth(inst):
    if not inst.externality.is_smooth:
        raise UnsupportedConfigurationError(
            "operation needs a twice-differentiable externality (proportional or congestion)")
