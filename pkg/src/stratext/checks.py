"""Cross-module invariant suite behind the ``check`` command.

Each check draws a handful of random instances, recomputes an invariant
independently and reports the worst deviation against its tolerance.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, parse_text, serialize
from .eqdiff import Loss, fd_jacobian, loss_gradient, ne_jacobian, strategic_loss
from .equilibrium import SolverConfig, br_dynamics, kkt_residual, solve_ne, verify_pne
from .game import (Externality, ExternalityModel, GameInstance, OutOfRangeWarning, agent_utility, pairwise_externality,
                   potential, potential_gradient, potential_hessian, total_externality)
from .learning import sample_complexity


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: worst={self.worst:.3g} tol={self.tolerance:.3g}"


def _instances(cfg, rng, n, variants=tuple(Externality), k_range=(2, 4), d_range=(1, 3)):
    """Random in-range instances; beta is scaled into each variant's concavity range."""
    out = []
    for t in range(n):
        variant = variants[t % len(variants)]
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        alpha = cfg.alpha
        cap = ExternalityModel(variant, 0.0, k).beta_threshold(alpha)
        beta = cfg.beta if variant is Externality.CONVEX_SQUARE_SUM else 0.9 * cap * rng.uniform()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OutOfRangeWarning)
            out.append(GameInstance.build(rng.uniform(0, 1, (k, d)), rng.choice([-1, 1], k), k,
                                          alpha, beta, variant, cfg.gain))
    return out


def _omega(rng, d, r):
    w = rng.normal(size=d)
    return w / np.linalg.norm(w) * r * rng.uniform(0.2, 1.0)


def check_potential_identity(cfg, rng):
    worst = 0.0
    for inst in _instances(cfg, rng, 30):
        w = _omega(rng, inst.d, cfg.norm_budget)
        i = int(rng.integers(inst.k))
        A = rng.uniform(0, 1, (inst.k, inst.d))
        B = A.copy()
        B[i] = rng.uniform(0, 1, inst.d)
        du = agent_utility(inst, i, A, w) - agent_utility(inst, i, B, w)
        dphi = potential(inst, A, w) - potential(inst, B, w)
        worst = max(worst, abs(du - dphi))
    return CheckResult("potential-game identity", worst <= 1e-9, worst, 1e-9)


def check_pair_symmetry(cfg, rng):
    worst = 0.0
    for inst in _instances(cfg, rng, 30):
        m = inst.externality
        X, Xr = inst.active_features, rng.uniform(0, 1, (inst.k, inst.d))
        a = pairwise_externality(m, X[0], Xr[0], X[1], Xr[1])
        b = pairwise_externality(m, X[1], Xr[1], X[0], Xr[0])
        both = sum(total_externality(m, i, X, Xr) for i in range(inst.k))
        pairs = sum(pairwise_externality(m, X[i], Xr[i], X[j], Xr[j])
                    for i in range(inst.k) for j in range(i + 1, inst.k))
        worst = max(worst, abs(a - b), abs(both - 2 * pairs))
    return CheckResult("externality symmetry and double counting", worst <= 1e-10, worst, 1e-10)


def check_gradient_and_hessian(cfg, rng):
    worst = 0.0
    h = 1e-6
    smooth = (Externality.PROPORTIONAL, Externality.CONGESTION)
    for inst in _instances(cfg, rng, 20, smooth):
        w = _omega(rng, inst.d, cfg.norm_budget)
        Xr = rng.uniform(0.05, 0.95, (inst.k, inst.d))
        G = potential_gradient(inst, Xr, w)
        fd = np.zeros_like(G)
        for idx in np.ndindex(*Xr.shape):
            E = np.zeros_like(Xr)
            E[idx] = h
            fd[idx] = (potential(inst, Xr + E, w) - potential(inst, Xr - E, w)) / (2 * h)
        H = potential_hessian(inst, Xr)
        worst = max(worst, np.max(np.abs(G - fd)) / (1 + np.max(np.abs(G))),
                    np.max(np.abs(H - H.T)))
    return CheckResult("potential gradient and Hessian symmetry", worst <= 1e-5, worst, 1e-5)


def check_equilibrium(cfg, rng):
    worst = 0.0
    solver = SolverConfig(kkt_tolerance=1e-10, multistart_count=5, multistart_seed=int(rng.integers(1 << 30)))
    for inst in _instances(cfg, rng, 12):
        w = _omega(rng, inst.d, cfg.norm_budget)
        eq = solve_ne(inst, w, solver)
        pne = verify_pne(inst, w, eq.reports)
        br, trace = br_dynamics(inst, w, inst.features, SolverConfig(kkt_tolerance=1e-12))
        drops = max((a - b for a, b in zip(trace, trace[1:])), default=0.0)
        worst = max(worst, eq.start_spread / 1e-5, max(pne.gain, 0.0) / 1e-6,
                    kkt_residual(inst, w, eq.reports) / solver.kkt_tolerance,
                    np.linalg.norm(br[: inst.k] - eq.active_reports) / 1e-4, drops / 1e-12)
    return CheckResult("equilibrium uniqueness, KKT, PNE and BR dynamics (scaled)", worst <= 1.0, worst, 1.0)


def check_jacobian(cfg, rng):
    worst = 0.0
    smooth = (Externality.PROPORTIONAL, Externality.CONGESTION)
    solver = SolverConfig(kkt_tolerance=1e-12)
    loss = Loss(cfg.loss)
    for inst in _instances(cfg, rng, 8, smooth, k_range=(2, 3), d_range=(1, 2)):
        w = _omega(rng, inst.d, 1.0)
        eq = solve_ne(inst, w, solver)
        jac = ne_jacobian(inst, w, eq, cfg=solver)
        if not jac.valid:
            continue
        fd = fd_jacobian(inst, w)
        g = loss_gradient(inst, w, loss, solver, eq)
        h = 1e-5
        g_fd = np.array([(strategic_loss(inst, w + h * e, loss, solver)
                          - strategic_loss(inst, w - h * e, loss, solver)) / (2 * h)
                         for e in np.eye(inst.d)])
        worst = max(worst,
                    np.max(np.abs(jac.matrix - fd)) / max(1.0, np.max(np.abs(fd))) / 1e-4,
                    np.max(np.abs(g - g_fd)) / max(1.0, np.max(np.abs(g_fd))) / 1e-3)
    return CheckResult("implicit Jacobian and loss gradient vs finite differences (scaled)",
                       worst <= 1.0, worst, 1.0)


def check_sample_complexity(cfg, rng):
    bad = 0
    for _ in range(20):
        eps = rng.uniform(0.01, 0.5)
        args = dict(gamma=rng.uniform(0.01, 0.5), d=int(rng.integers(1, 6)),
                    lipschitz=1.0, eta=rng.uniform(0.5, 5), r=rng.uniform(0.5, 3))
        n1, n2 = sample_complexity(eps, **args), sample_complexity(eps / 2, **args)
        bad += not n2 > 4 * n1 - 4
        bad += sample_complexity(eps, **{**args, "d": args["d"] + 1}) < n1
    return CheckResult("sample-complexity monotonicity", bad == 0, float(bad), 0.0)


def check_config_roundtrip(cfg, rng):
    ok = parse_text(serialize(cfg)) == cfg and parse_text("") == ExperimentConfig()
    return CheckResult("config round-trip", ok, float(not ok), 0.0)


CHECKS = (check_potential_identity, check_pair_symmetry, check_gradient_and_hessian,
          check_equilibrium, check_jacobian, check_sample_complexity, check_config_roundtrip)


def run_suite(cfg=None, seed=0):
    cfg = cfg or ExperimentConfig()
    rng = np.random.default_rng(seed)
    return [check(cfg, rng) for check in CHECKS]
