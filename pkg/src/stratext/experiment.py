"""Seeded training runs over an ablation grid, emitted as CSV."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .errors import StratextError
from .learning import make_dataset, train

log = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "mode", "seed", "epoch", "k", "alpha", "beta", "train_loss", "val_loss")
SUMMARY_HEADER = ("experiment", "mode", "epoch", "k", "alpha", "beta", "n_seeds",
                  "train_mean", "train_p05", "train_p95", "val_mean", "val_p05", "val_p95")


@dataclass(frozen=True)
class CsvRecord:
    experiment: str
    mode: str
    seed: int
    epoch: int
    k: int
    alpha: float
    beta: float
    train_loss: float
    val_loss: float

    def row(self):
        return (self.experiment, self.mode, str(self.seed), str(self.epoch), str(self.k),
                _num(self.alpha), _num(self.beta), _num(self.train_loss), _num(self.val_loss))


@dataclass(frozen=True)
class FailedRun:
    k: int
    alpha: float
    beta: float
    seed: int
    mode: str
    reason: str


@dataclass
class ExperimentResult:
    records: list
    failures: list

    def summary(self):
        return summarize(self.records)


def _num(x):
    return format(float(x), ".9g")


def seeded_datasets(cfg, seed, k=None, alpha=None, beta=None):
    """Training and validation sets for one (cell, seed); every mode shares them."""
    pop = cfg.population(k)
    game = cfg.game(alpha, beta)
    train_seed, val_seed = np.random.SeedSequence(seed).generate_state(2)
    return (make_dataset(pop, game, cfg.n_train, int(train_seed)),
            make_dataset(pop, game, cfg.n_val, int(val_seed)))


def run_cell(cfg, seed, k, alpha, beta, modes=None):
    """Train every requested mode on one (cell, seed); returns (records, failures)."""
    data, val = seeded_datasets(cfg, seed, k, alpha, beta)
    k_label = k if k is not None else cfg.k_max
    records, failures = [], []
    for mode in modes or cfg.modes:
        try:
            trace = train(data, val, cfg.train_config(mode, seed))
        except StratextError as exc:
            log.warning("cell k=%s alpha=%s beta=%s seed=%s mode=%s failed: %s",
                        k_label, alpha, beta, seed, mode, exc)
            failures.append(FailedRun(k_label, alpha, beta, seed, mode, str(exc)))
            continue
        for e, (tl, vl) in enumerate(zip(trace.train_loss, trace.val_loss), 1):
            records.append(CsvRecord(cfg.experiment, mode, seed, e, k_label, alpha, beta, tl, vl))
    return records, failures


def run_experiment(cfg, progress=None):
    """All modes x seeds x ablation cells, in deterministic (cell, seed, mode) order."""
    records, failures = [], []
    for k, alpha, beta in cfg.cells():
        for seed in cfg.seeds:
            r, f = run_cell(cfg, seed, k, alpha, beta)
            records += r
            failures += f
            if progress:
                progress(k, alpha, beta, seed)
    return ExperimentResult(records, failures)


def summarize(records):
    """Mean and 5th/95th percentiles across seeds per (cell, mode, epoch)."""
    groups = {}
    for r in records:
        groups.setdefault((r.experiment, r.mode, r.epoch, r.k, r.alpha, r.beta), []).append(r)
    rows = []
    for key, rs in groups.items():
        tl = np.array([r.train_loss for r in rs])
        vl = np.array([r.val_loss for r in rs])
        rows.append(key + (len(rs), tl.mean(), *np.percentile(tl, [5, 95]),
                           vl.mean(), *np.percentile(vl, [5, 95])))
    return rows


def _write(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def records_csv(records):
    return _write(CSV_HEADER, (r.row() for r in records))


def summary_csv(rows):
    def fmt(row):
        exp, mode, epoch, k, alpha, beta, n = row[:7]
        return (exp, mode, str(epoch), str(k), _num(alpha), _num(beta), str(n),
                *(_num(v) for v in row[7:]))
    return _write(SUMMARY_HEADER, (fmt(r) for r in rows))


def trace_records(cfg, trace, mode, seed, k=None):
    k = cfg.k_max if k is None else k
    return [CsvRecord(cfg.experiment, mode, seed, e, k, cfg.alpha, cfg.beta, tl, vl)
            for e, (tl, vl) in enumerate(zip(trace.train_loss, trace.val_loss), 1)]

