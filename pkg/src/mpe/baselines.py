"""Count-based comparison models: per-object first-order Markov and naive Bayes."""
from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence, TextIO

from .predict import Backoff, PredictionError, Query, RankedPrediction, top_k

FORMAT_TAG = "mpe-counts"
FORMAT_VERSION = 1


@dataclass
class CountsModel:
    alpha: float = 1.0
    quads: Counter = field(default_factory=Counter)          # (o, t, li, lj) -> n
    obj_trans: dict = field(default_factory=lambda: defaultdict(Counter))  # (o, li) -> {lj: n}
    trans: dict = field(default_factory=lambda: defaultdict(Counter))      # li -> {lj: n}
    obj_next: Counter = field(default_factory=Counter)       # (o, lj)
    time_next: Counter = field(default_factory=Counter)      # (t, lj)
    next_count: Counter = field(default_factory=Counter)     # lj
    objects: set = field(default_factory=set)
    times: set = field(default_factory=set)
    total: int = 0

    @property
    def n_current(self) -> int:
        return len(self.trans)

    def candidates(self, li) -> list:
        return sorted(self.trans.get(li, ()))

    def add(self, quad, n: int = 1) -> None:
        o, t, li, lj = quad
        self.quads[quad] += n
        self.obj_trans[(o, li)][lj] += n
        self.trans[li][lj] += n
        self.obj_next[(o, lj)] += n
        self.time_next[(t, lj)] += n
        self.next_count[lj] += n
        self.objects.add(o)
        self.times.add(t)
        self.total += n


def fit_counts(train: Iterable[tuple], alpha: float = 1.0) -> CountsModel:
    """Accumulate every count table in one pass over token quadruples."""
    model = CountsModel(alpha=alpha)
    for q in train:
        model.add(tuple(q))
    if model.total == 0:
        raise ValueError("empty training set")
    return model


def _popularity(model: CountsModel, k: int, flag: Backoff) -> RankedPrediction:
    tokens = list(model.next_count)
    return RankedPrediction(top_k(tokens, [model.next_count[t] for t in tokens], k), flag)


def _smoothed(counts: Counter, cands: Sequence, alpha: float) -> list[float]:
    denom = sum(counts[c] for c in cands) + alpha * len(cands)
    return [(counts[c] + alpha) / denom for c in cands]


def markov_rank(model: CountsModel, query: Query, k: int) -> RankedPrediction:
    """Per-object transition MLE at the current location, backing off to global counts."""
    if k < 1:
        raise PredictionError(f"k must be >= 1, got {k}")
    cands = model.candidates(query.current)
    if not cands:
        return _popularity(model, k, Backoff.UNSEEN_CURRENT)
    own = model.obj_trans.get((query.object, query.current))
    if own:
        return RankedPrediction(top_k(cands, _smoothed(own, cands, model.alpha), k))
    glob = model.trans[query.current]
    return RankedPrediction(top_k(cands, _smoothed(glob, cands, model.alpha), k), Backoff.UNSEEN_OBJECT)


def _log_ratio(num: float, denom: float) -> float:
    if num <= 0:
        return -math.inf
    return math.log(num / denom)


def bayes_log_score(model: CountsModel, query: Query, lj) -> float:
    """log P(o|lj) + log P(li|lj) + log P(t|lj) + log P(lj), each additively smoothed."""
    a = model.alpha
    n_j = model.next_count[lj]
    return (_log_ratio(model.obj_next[(query.object, lj)] + a, n_j + a * len(model.objects))
            + _log_ratio(model.trans[query.current][lj] + a, n_j + a * model.n_current)
            + _log_ratio(model.time_next[(query.slot, lj)] + a, n_j + a * len(model.times))
            + _log_ratio(n_j + a, model.total + a * len(model.next_count)))


def bayes_posterior(model: CountsModel, query: Query, lj) -> Fraction:
    """Exact unnormalized posterior; ranking on it keeps exact ties tied."""
    a = Fraction(model.alpha)
    n_j = model.next_count[lj]
    factors = [(model.obj_next[(query.object, lj)] + a, n_j + a * len(model.objects)),
               (model.trans[query.current][lj] + a, n_j + a * model.n_current),
               (model.time_next[(query.slot, lj)] + a, n_j + a * len(model.times)),
               (n_j + a, model.total + a * len(model.next_count))]
    out = Fraction(1)
    for num, denom in factors:
        if num == 0:
            return Fraction(0)
        out *= num / denom
    return out


def bayes_rank(model: CountsModel, query: Query, k: int) -> RankedPrediction:
    """Rank candidates by posterior; ties go to the smaller token."""
    if k < 1:
        raise PredictionError(f"k must be >= 1, got {k}")
    cands = model.candidates(query.current)
    if not cands:
        return _popularity(model, k, Backoff.UNSEEN_CURRENT)
    flag = Backoff.NONE
    if query.slot not in model.times:
        flag = Backoff.UNSEEN_TIME
    if query.object not in model.objects:
        flag = Backoff.UNSEEN_OBJECT
    ranked = sorted(cands, key=lambda c: (-bayes_posterior(model, query, c), c))[:k]
    return RankedPrediction([(c, bayes_log_score(model, query, c)) for c in ranked], flag)


# --------------------------------------------------------------------------
# TSV serialization: one header line, then one row per distinct quadruple

def write_counts(model: CountsModel, stream: TextIO) -> None:
    stream.write(f"#{FORMAT_TAG}\t{FORMAT_VERSION}\talpha\t{model.alpha!r}\n")
    stream.write("object\tslot\tcurrent\tnext\tcount\n")
    for (o, t, li, lj), n in sorted(model.quads.items(), key=lambda kv: tuple(map(str, kv[0]))):
        stream.write(f"{o}\t{t}\t{li}\t{lj}\t{n}\n")


def read_counts(stream: TextIO) -> CountsModel:
    head = stream.readline().rstrip("\n").split("\t")
    if len(head) != 4 or head[0] != f"#{FORMAT_TAG}" or head[2] != "alpha":
        raise ValueError("not a counts model file")
    if int(head[1]) != FORMAT_VERSION:
        raise ValueError(f"unsupported counts format version {head[1]}")
    model = CountsModel(alpha=float(head[3]))
    stream.readline()
    for line in stream:
        o, t, li, lj, n = line.rstrip("\n").split("\t")
        model.add((o, int(t), li, lj), int(n))
    return model
