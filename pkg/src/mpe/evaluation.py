"""Ranking metrics and the multi-run experiment harness."""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np

from . import baselines
from .data import split
from .model import ComponentMask, Hyperparams, derive_seed, fit_mpe
from .predict import Backoff, Query, RankedPrediction, rank_next

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 2, 3)

MPE_VARIANTS = {
    "mpe": ("full", False),
    "mpe-plain": ("plain", False),
    "mpe-object": ("object", False),
    "mpe-time": ("time", False),
    "mpe-tied": ("full", True),
}
COUNT_MODELS = ("mm", "bayes")
MODEL_NAMES = tuple(MPE_VARIANTS) + COUNT_MODELS


def _check(ranked: Sequence, truths: Sequence, k: int) -> None:
    if len(ranked) != len(truths):
        raise ValueError(f"{len(ranked)} ranked lists but {len(truths)} truths")
    if k < 1:
        raise ValueError("k must be >= 1")


def _rank_of(tokens: Sequence, truth, k: int) -> int | None:
    for w, tok in enumerate(tokens[:k], start=1):
        if tok == truth:
            return w
    return None


def accuracy_at_k(ranked: Sequence[Sequence], truths: Sequence, k: int) -> float:
    """Fraction of queries whose true next location is in the top ``k``."""
    _check(ranked, truths, k)
    if not truths:
        return 0.0
    hits = sum(_rank_of(r, t, k) is not None for r, t in zip(ranked, truths))
    return hits / len(truths)


def average_precision_at_k(ranked: Sequence[Sequence], truths: Sequence, k: int) -> float:
    """Mean of 1/w over queries, w the 1-based rank of the truth (0 if beyond k)."""
    _check(ranked, truths, k)
    if not truths:
        return 0.0
    total = 0.0
    for r, t in zip(ranked, truths):
        w = _rank_of(r, t, k)
        if w is not None:
            total += 1.0 / w
    return total / len(truths)


def metric_row(ranked: Sequence[Sequence], truths: Sequence, ks: Sequence[int] = DEFAULT_KS) -> dict:
    row = {f"acc@{k}": accuracy_at_k(ranked, truths, k) for k in ks}
    row.update({f"ap@{k}": average_precision_at_k(ranked, truths, k) for k in ks})
    return row


@dataclass
class EvalReport:
    model: str
    ks: tuple = DEFAULT_KS
    runs: list = field(default_factory=list)  # one metric row per run
    n_test: int = 0
    backoff: dict = field(default_factory=dict)  # flag -> number of test queries

    @property
    def columns(self) -> list[str]:
        return [f"acc@{k}" for k in self.ks] + [f"ap@{k}" for k in self.ks]

    @property
    def mean(self) -> dict:
        return {c: float(np.mean([r[c] for r in self.runs])) for c in self.columns}

    @property
    def stderr(self) -> dict:
        n = len(self.runs)
        if n < 2:
            return {c: 0.0 for c in self.columns}
        return {c: float(np.std([r[c] for r in self.runs], ddof=1) / math.sqrt(n)) for c in self.columns}


def evaluate_ranker(ranker: Callable[[Query, int], RankedPrediction], test: Sequence[tuple],
                    ks: Sequence[int] = DEFAULT_KS) -> tuple[dict, Counter]:
    """Metric row and backoff-flag counts of ``ranker`` over token test quadruples."""
    k_max = max(ks)
    ranked, truths = [], []
    flags = Counter()
    for o, t, li, lj in test:
        pred = ranker(Query(o, t, li), k_max)
        ranked.append(pred.tokens)
        truths.append(lj)
        if pred.backoff is not Backoff.NONE:
            flags[pred.backoff.value] += 1
    return metric_row(ranked, truths, ks), flags


@dataclass
class ExperimentConfig:
    models: Sequence[str] = ("mpe", "mm", "bayes")
    runs: int = 1
    base_seed: int = 0
    split_ratios: Sequence[float] = (8, 1, 1)
    hyper: Hyperparams = Hyperparams()
    alpha: float = 1.0
    ks: Sequence[int] = DEFAULT_KS
    full_vocab: bool = False
    exclude: str = "context"

    def __post_init__(self):
        unknown = set(self.models) - set(MODEL_NAMES)
        if unknown:
            raise ValueError(f"unknown models {sorted(unknown)}; choose from {list(MODEL_NAMES)}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


def run_experiment(quads: Sequence[tuple], config: ExperimentConfig) -> dict[str, EvalReport]:
    """Split once, then train/evaluate each model ``config.runs`` times.

    The split is shared by every run; run ``r`` (1-based) trains with seed
    ``base_seed + r``.  Count models are deterministic and evaluated once.
    """
    train_q, _, test_q = split(quads, config.split_ratios, derive_seed(config.base_seed, "split"))
    log.info("split: %d train / %d test", len(train_q), len(test_q))
    ks = tuple(config.ks)
    reports = {}

    counts = None
    for name in config.models:
        report = EvalReport(name, ks, n_test=len(test_q))
        if name in COUNT_MODELS:
            if counts is None:
                counts = baselines.fit_counts(train_q, config.alpha)
            rank = baselines.markov_rank if name == "mm" else baselines.bayes_rank
            row, flags = evaluate_ranker(lambda q, k: rank(counts, q, k), test_q, ks)
            report.runs.append(row)
            report.backoff = dict(flags)
        else:
            mask_name, tied = MPE_VARIANTS[name]
            for r in range(1, config.runs + 1):
                hyper = replace(config.hyper, seed=config.base_seed + r)
                model = fit_mpe(train_q, hyper, ComponentMask.named(mask_name), tie_locations=tied,
                                exclude=config.exclude)
                row, flags = evaluate_ranker(
                    lambda q, k: rank_next(model, None, q, k, full_vocab=config.full_vocab), test_q, ks)
                report.runs.append(row)
                report.backoff = dict(flags)
                log.info("%s run %d: %s", name, r, row)
        reports[name] = report
    return reports


def write_report_tsv(reports: dict[str, EvalReport], stream: TextIO) -> None:
    """One mean row per model, followed by the per-run rows."""
    first = next(iter(reports.values()))
    cols = first.columns
    stream.write("\t".join(["model", "run", *cols, "n_test", "backoff"]) + "\n")
    for name, rep in reports.items():
        backoff = ",".join(f"{k}={v}" for k, v in sorted(rep.backoff.items())) or "-"
        mean = rep.mean
        stream.write("\t".join([name, "mean", *(f"{mean[c]:.6f}" for c in cols), str(rep.n_test), backoff]) + "\n")
        for r, row in enumerate(rep.runs, start=1):
            stream.write("\t".join([name, str(r), *(f"{row[c]:.6f}" for c in cols), str(rep.n_test), backoff]) + "\n")


def format_table(reports: dict[str, EvalReport]) -> str:
    first = next(iter(reports.values()))
    cols = first.columns
    width = max(len("model"), *(len(n) for n in reports))
    lines = ["  ".join(["model".ljust(width), *(c.rjust(7) for c in cols)])]
    for name, rep in reports.items():
        mean = rep.mean
        lines.append("  ".join([name.ljust(width), *(f"{mean[c]:7.3f}" for c in cols)]))
    return "\n".join(lines)
