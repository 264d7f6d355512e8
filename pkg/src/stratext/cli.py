"""Command-line entry point.

Every config key is also a ``--key value`` flag; ``--config path`` loads a
file first and flags override it. Exit status is 0 on success, 2 for usage
and configuration errors, and 1 when the model or a solver fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checks
from .config import DEFAULTS, ExperimentConfig, from_pairs, load_config
from .eqdiff import DegenerateJacobianWarning, Loss, fd_jacobian, loss_gradient, ne_jacobian, strategic_loss
from .equilibrium import solve_ne
from .errors import ConfigurationError, StratextError, UsageError
from .experiment import records_csv, run_experiment, seeded_datasets, summary_csv, trace_records
from .game import GameInstance, OutOfRangeWarning
from .learning import (Mode, estimate_externality_lipschitz, lipschitz_constants, sample_complexity,
                       sample_instance, train)

log = logging.getLogger("stratext")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diag(f"{self.prog}: {message}")
        sys.exit(2)


def _diag(message):
    color = sys.stderr.isatty() and "NO_COLOR" not in os.environ
    prefix = "\033[31merror:\033[0m" if color else "error:"
    print(f"{prefix} {message}", file=sys.stderr)


def _add_config_flags(p):
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    group = p.add_argument_group("config keys (override the file)")
    for key in DEFAULTS:
        group.add_argument(f"--{key.replace('_', '-')}", f"--{key}", dest=f"cfg_{key}",
                           metavar="VALUE", default=None)


def _config(args):
    base = load_config(args.config) if args.config else ExperimentConfig()
    pairs = [(key, getattr(args, f"cfg_{key}")) for key in DEFAULTS
             if getattr(args, f"cfg_{key}") is not None]
    return from_pairs(pairs, base) if pairs else base


def _instance(cfg):
    """The config's explicit instance, or one sampled with the first seed."""
    game = cfg.game()
    if cfg.features:
        X = np.asarray(cfg.features).reshape(cfg.k_max, cfg.d)
        y = np.asarray(cfg.labels or [1] * cfg.k_max)
        return GameInstance.build(X, y, cfg.k_max, game.alpha, game.beta, game.variant, game.gain)
    return sample_instance(cfg.population(), np.random.default_rng(cfg.seeds[0]), game)


def cmd_solve(cfg, args):
    inst = _instance(cfg)
    w = cfg.omega_vector()
    eq = solve_ne(inst, w, cfg.solver())
    out = {
        "k": inst.k,
        "features": inst.active_features.tolist(),
        "omega": w.tolist(),
        "reports": eq.active_reports.tolist(),
        "dual_upper": eq.dual_upper.tolist(),
        "dual_lower": eq.dual_lower.tolist(),
        "kkt_residual": eq.kkt_residual,
        "iterations": eq.iterations,
        "converged": eq.converged,
        "potential": eq.potential,
    }
    print(json.dumps(out, indent=2))
    return 0


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))


def cmd_gradcheck(cfg, args):
    inst = _instance(cfg)
    w = cfg.omega_vector()
    solver = cfg.solver()
    eq = solve_ne(inst, w, solver)
    jac = ne_jacobian(inst, w, eq, cfg=solver)
    fd = fd_jacobian(inst, w, h=args.h)
    loss = Loss(cfg.loss)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateJacobianWarning)
        g = loss_gradient(inst, w, loss, solver, eq)
    g_fd = np.array([(strategic_loss(inst, w + args.h * e, loss, solver)
                      - strategic_loss(inst, w - args.h * e, loss, solver)) / (2 * args.h)
                     for e in np.eye(inst.d)])
    jac_err = _rel(jac.matrix, fd) if jac.valid else float("nan")
    grad_err = _rel(g, g_fd)
    print(f"jacobian_max_rel_error {jac_err:.3e}")
    print(f"gradient_max_rel_error {grad_err:.3e}")
    print(f"degenerate_coords {list(jac.degenerate_coords)}")
    ok = (not jac.valid or jac_err <= 1e-4) and grad_err <= 1e-3
    return 0 if ok else 1


def cmd_train(cfg, args):
    seed = cfg.seeds[0]
    data, val = seeded_datasets(cfg, seed)
    trace = train(data, val, cfg.train_config(args.mode, seed))
    text = records_csv(trace_records(cfg, trace, args.mode, seed))
    _emit(text, args.out)
    return 0


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(text.encode("utf-8"))


def cmd_experiment(cfg, args):
    def progress(k, alpha, beta, seed):
        log.info("done k=%s alpha=%s beta=%s seed=%s", k, alpha, beta, seed)

    result = run_experiment(cfg, progress)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    main = out_dir / f"{cfg.experiment}.csv"
    summary = out_dir / f"{cfg.experiment}_summary.csv"
    main.write_bytes(records_csv(result.records).encode("utf-8"))
    summary.write_bytes(summary_csv(result.summary()).encode("utf-8"))
    print(f"records {len(result.records)} -> {main}")
    print(f"summary -> {summary}")
    for f in result.failures:
        print(f"failed k={f.k} alpha={f.alpha} beta={f.beta} seed={f.seed} mode={f.mode}: {f.reason}")
    return 0


def cmd_check(cfg, args):
    results = checks.run_suite(cfg, seed=args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bound(cfg, args):
    n = sample_complexity(args.eps, args.gamma, args.d, args.lam, args.eta, args.r)
    print(n)
    return 0


def cmd_lipschitz(cfg, args):
    rng = np.random.default_rng(cfg.seeds[0])
    game = cfg.game()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfRangeWarning)
        inst = GameInstance.build(rng.uniform(0, 1, (cfg.k_max, cfg.d)), None, cfg.k_max,
                                  game.alpha, game.beta, game.variant, game.gain)
    omegas = [rng.normal(size=cfg.d) for _ in range(args.samples)]
    omegas = [w / np.linalg.norm(w) * cfg.norm_budget * rng.uniform() for w in omegas]
    reports = [rng.uniform(0, 1, (cfg.k_max, cfg.d)) for _ in range(args.samples)]
    c, gamma, eta = lipschitz_constants(inst, omegas, reports)
    lam_ext = estimate_externality_lipschitz(inst.externality, cfg.d, args.samples * 10, rng)
    print(f"c {c:.9g}")
    print(f"gamma {gamma:.9g}")
    print(f"eta {eta:.9g}")
    print(f"lambda_ext {lam_ext:.9g}")
    return 0


def build_parser():
    parser = _Parser(prog="stratext", description="Equilibria, implicit gradients and training for classifiers facing manipulating agents.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            _add_config_flags(p)
        p.set_defaults(fn=fn, uses_config=config)
        return p

    add("solve", cmd_solve, "solve one instance and print the equilibrium as JSON")
    p = add("gradcheck", cmd_gradcheck, "compare implicit derivatives with finite differences")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p = add("train", cmd_train, "train one mode on the first seed and print the CSV trace")
    p.add_argument("--mode", choices=[m.value for m in Mode], default="strategic")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    add("experiment", cmd_experiment, "all modes x seeds x ablation grid, written to output_dir")
    p = add("check", cmd_check, "run the invariant suite; exit 1 if any check fails")
    p.add_argument("--seed", type=int, default=0)
    p = add("bound", cmd_bound, "sample-complexity calculator", config=False)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True, help="loss Lipschitz constant")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--r", type=float, required=True)
    p = add("lipschitz", cmd_lipschitz, "estimate the equilibrium-map Lipschitz constants")
    p.add_argument("--samples", type=int, default=200)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args) if args.uses_config else None
        return args.fn(cfg, args)
    except (UsageError, ConfigurationError) as exc:
        _diag(str(exc))
        return 2
    except StratextError as exc:
        _diag(f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
