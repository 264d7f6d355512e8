"""Flat ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment, vectors are comma
separated and an empty right-hand side means "use the default". Every key
and its default are listed in ``DEFAULTS``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .eqdiff import Loss
from .equilibrium import SolverConfig
from .errors import ConfigurationError
from .game import Externality
from .learning import GameSpec, Mode, PopulationModel, TrainConfig


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _names(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fmt(value):
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "default"
    # population
    d: int = 2
    mean_pos: tuple = (0.7, 0.3)
    mean_neg: tuple = (0.3, 0.7)
    stddev: float = 0.15
    pos_fraction: float = 0.5
    k_max: int = 4
    k_weights: tuple = ()          # empty: all mass on k_max
    # game
    alpha: float = 1.0
    beta: float = 1.0
    variant: str = "convex_square_sum"
    gain: float = 1.0
    # training
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1.0
    norm_budget: float = 3.0
    loss: str = "logistic"
    kkt_tolerance: float = 1e-8
    max_iterations: int = 10_000
    modes: tuple = ("strategic", "truthful", "cost_only")
    # experiment
    n_train: int = 32
    n_val: int = 32
    seeds: tuple = tuple(range(15))
    grid_k: tuple = ()
    grid_alpha: tuple = ()
    grid_beta: tuple = ()
    output_dir: str = "results"
    # single-instance commands
    omega: tuple = ()              # empty: zero weights
    features: tuple = ()           # empty: sample from the population; else k_max*d values row-major
    labels: tuple = ()

    def __post_init__(self):
        _validate(self)

    # derived objects ------------------------------------------------------
    def weights_k(self, k_max=None):
        k_max = self.k_max if k_max is None else k_max
        if self.k_weights and k_max == self.k_max:
            return self.k_weights
        w = [0.0] * k_max
        w[-1] = 1.0
        return tuple(w)

    def population(self, k=None):
        """Population model; ``k`` pins every instance to exactly k active agents."""
        k_max = self.k_max if k is None else k
        return PopulationModel(self.mean_pos, self.mean_neg, self.stddev, self.pos_fraction,
                               self.weights_k(k_max))

    def game(self, alpha=None, beta=None):
        return GameSpec(self.alpha if alpha is None else alpha,
                        self.beta if beta is None else beta,
                        Externality(self.variant), self.gain)

    def solver(self):
        return SolverConfig(kkt_tolerance=self.kkt_tolerance, max_iterations=self.max_iterations)

    def train_config(self, mode, seed):
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.norm_budget,
                           Loss(self.loss), self.solver(), Mode(mode), seed)

    def omega_vector(self):
        return np.asarray(self.omega, dtype=float) if self.omega else np.zeros(self.d)

    def cells(self):
        """Ablation grid as (k, alpha, beta) triples; empty grids use the base value."""
        ks = self.grid_k or (None,)
        alphas = self.grid_alpha or (self.alpha,)
        betas = self.grid_beta or (self.beta,)
        return [(k, a, b) for k in ks for a in alphas for b in betas]


_PARSERS = {
    str: str.strip,
    int: lambda t: int(t.strip()),
    float: lambda t: float(t.strip()),
}
_VECTOR_PARSERS = {
    "mean_pos": _floats, "mean_neg": _floats, "k_weights": _floats,
    "modes": _names, "seeds": _ints, "grid_k": _ints, "grid_alpha": _floats,
    "grid_beta": _floats, "omega": _floats, "features": _floats, "labels": _ints,
}
DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def parse_value(key, text):
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown key {key!r}", key=key)
    if key in _VECTOR_PARSERS:
        conv = _VECTOR_PARSERS[key]
    else:
        conv = _PARSERS[type(DEFAULTS[key])]
    try:
        return conv(text)
    except ValueError:
        raise ConfigurationError(f"cannot parse {key} = {text.strip()!r}", key=key) from None


def _check(ok, key, message):
    if not ok:
        raise ConfigurationError(f"{key}: {message}", key=key)


def _validate(c):
    _check(c.d >= 1, "d", "must be at least 1")
    for key in ("mean_pos", "mean_neg"):
        v = getattr(c, key)
        _check(len(v) == c.d, key, f"needs {c.d} entries")
        _check(all(0 <= x <= 1 for x in v), key, "entries must lie in [0, 1]")
    _check(c.stddev >= 0, "stddev", "must be nonnegative")
    _check(0 <= c.pos_fraction <= 1, "pos_fraction", "must lie in [0, 1]")
    _check(c.k_max >= 1, "k_max", "must be at least 1")
    if c.k_weights:
        _check(len(c.k_weights) == c.k_max, "k_weights", f"needs {c.k_max} entries")
        _check(all(w >= 0 for w in c.k_weights) and abs(sum(c.k_weights) - 1) <= 1e-9,
               "k_weights", "must be a probability vector")
    _check(c.alpha > 0, "alpha", "must be positive")
    _check(c.beta >= 0, "beta", "must be nonnegative")
    _check(c.variant in {v.value for v in Externality}, "variant",
           "must be one of " + ", ".join(v.value for v in Externality))
    _check(c.gain > 0, "gain", "must be positive")
    _check(c.epochs >= 0, "epochs", "must be nonnegative")
    _check(c.batch_size >= 1, "batch_size", "must be at least 1")
    _check(c.learning_rate >= 0, "learning_rate", "must be nonnegative")
    _check(c.norm_budget > 0, "norm_budget", "must be positive")
    _check(c.loss in {v.value for v in Loss}, "loss", "must be logistic or hinge")
    _check(c.kkt_tolerance > 0, "kkt_tolerance", "must be positive")
    _check(c.max_iterations >= 1, "max_iterations", "must be at least 1")
    _check(len(c.modes) >= 1 and all(m in {v.value for v in Mode} for m in c.modes), "modes",
           "must list strategic, truthful and/or cost_only")
    _check(len(set(c.modes)) == len(c.modes), "modes", "must not repeat")
    _check(c.n_train >= 1, "n_train", "must be at least 1")
    _check(c.n_val >= 1, "n_val", "must be at least 1")
    _check(len(c.seeds) >= 1, "seeds", "must not be empty")
    _check(all(k >= 1 for k in c.grid_k), "grid_k", "entries must be at least 1")
    _check(all(a > 0 for a in c.grid_alpha), "grid_alpha", "entries must be positive")
    _check(all(b >= 0 for b in c.grid_beta), "grid_beta", "entries must be nonnegative")
    if c.omega:
        _check(len(c.omega) == c.d, "omega", f"needs {c.d} entries")
        _check(float(np.linalg.norm(c.omega)) <= c.norm_budget * (1 + 1e-12), "omega",
               "norm exceeds norm_budget")
    if c.features:
        _check(len(c.features) == c.k_max * c.d, "features", f"needs k_max*d = {c.k_max * c.d} entries")
        _check(all(0 <= x <= 1 for x in c.features), "features", "entries must lie in [0, 1]")
    if c.labels:
        _check(len(c.labels) == c.k_max, "labels", f"needs {c.k_max} entries")
        _check(all(y in (-1, 1) for y in c.labels), "labels", "entries must be -1 or +1")


def from_pairs(pairs, base=None):
    """Apply ``(key, text)`` overrides on top of ``base`` (defaults when None)."""
    values = {} if base is None else {f.name: getattr(base, f.name) for f in fields(base)}
    for key, text in pairs:
        value = parse_value(key, text)
        values[key] = DEFAULTS[key] if text.strip() == "" else value
    return ExperimentConfig(**values)


def parse_text(text, source="<config>"):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'", key=key or None)
        if key not in DEFAULTS:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}", key=key)
        try:
            parse_value(key, value)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{lineno}: {exc}", key=key) from None
        pairs.append((key, value))
    return from_pairs(pairs)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_text(text, source=str(path))


def serialize(cfg):
    return "".join(f"{f.name} = {_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))
