"""Top-k next-location ranking with deterministic ties and explicit backoff."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .data import CandidateIndex
from .model import MPEModel, conditional_vector, score


class Backoff(str, Enum):
    NONE = "none"
    UNSEEN_OBJECT = "unseen_object"
    UNSEEN_TIME = "unseen_time"
    UNSEEN_CURRENT = "unseen_current"
    EMPTY_CANDIDATES = "empty_candidates"


@dataclass(frozen=True)
class Query:
    object: str
    slot: int
    current: str


@dataclass
class RankedPrediction:
    items: list  # [(token, score)], best first
    backoff: Backoff = Backoff.NONE

    @property
    def tokens(self) -> list:
        return [tok for tok, _ in self.items]


class PredictionError(ValueError):
    pass


def top_k(tokens: Sequence, scores: Sequence[float], k: int) -> list:
    """Sort by score descending, then token ascending, and keep ``k``."""
    order = sorted(zip(tokens, scores), key=lambda ts: (-ts[1], ts[0]))
    return [(tok, float(s)) for tok, s in order[:k]]


def popularity_ranking(tokens: Sequence, counts: Sequence[int], k: int, flag: Backoff) -> RankedPrediction:
    return RankedPrediction(top_k(tokens, counts, k), flag)


def rank_next(model: MPEModel, candidates: CandidateIndex | None, query: Query, k: int,
              full_vocab: bool = False) -> RankedPrediction:
    """Rank the candidate next locations of ``query.current``.

    Unseen object or slot contributes a zero vector; an unseen current location
    or an empty candidate list falls back to global next-location popularity.
    ``full_vocab`` ranks every next location seen in training instead.
    """
    if k < 1:
        raise PredictionError(f"k must be >= 1, got {k}")
    if candidates is None:
        candidates = model.candidates
    vocab = model.vocab
    next_tokens = vocab.next.tokens

    i = vocab.current.index_of(query.current)
    if i is None:
        return popularity_ranking(next_tokens, model.popularity, k, Backoff.UNSEEN_CURRENT)
    cands = candidates.support() if full_vocab else candidates(i)
    if not cands:
        return popularity_ranking(next_tokens, model.popularity, k, Backoff.EMPTY_CANDIDATES)

    o = vocab.objects.index_of(query.object)
    t = vocab.times.index_of(query.slot)
    flag = Backoff.NONE
    if t is None and model.mask.use_time:
        flag = Backoff.UNSEEN_TIME
    if o is None and model.mask.use_object:
        flag = Backoff.UNSEEN_OBJECT

    v = conditional_vector(model.store, model.mask, o, t, i)
    scores = score(model.store, v, np.asarray(cands))
    return RankedPrediction(top_k([next_tokens[j] for j in cands], scores, k), flag)


def predict_batch(model: MPEModel, candidates: CandidateIndex | None, queries: Sequence[Query], k: int,
                  full_vocab: bool = False) -> list[RankedPrediction]:
    out = []
    errors = []
    for n, q in enumerate(queries):
        try:
            out.append(rank_next(model, candidates, q, k, full_vocab))
        except Exception as exc:
            errors.append(f"query {n}: {exc}")
    if errors:
        raise PredictionError("; ".join(errors))
    return out
