"""Mobility pattern embedding: scoring, negative sampling and SGD training.

A query ``(object o, slot t, current location l_i)`` is embedded as the
conditional vector ``V = O[o] + T[t] + Lc[l_i]``.  Next locations live in a
separate matrix ``Ln`` and are ranked by ``-||Ln[l_j] - V||^2``.  Training
maximizes ``log sigmoid(||Ln[l_m] - V||^2 - ||Ln[l_j] - V||^2)`` over observed
next locations ``l_j`` and sampled unobserved ones ``l_m``, with L2
regularization on the rows each instance touches.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numba
import numpy as np

from .data import CandidateIndex, DataError, IndexedQuads, Vocabulary, build_vocab_and_index

log = logging.getLogger(__name__)

INIT_STD = 0.1  # N(0, 0.01) read as variance


class NumericalError(ArithmeticError):
    """Raised when training produces a non-finite value."""


@dataclass(frozen=True)
class Hyperparams:
    dim: int = 100
    negatives: int = 1
    lr: float = 1e-3
    reg: float = 1e-3
    epochs: int = 10
    seed: int = 0
    early_stop_rel_tol: float = 0.0

    def __post_init__(self):
        if self.dim < 1 or self.negatives < 1 or self.epochs < 1:
            raise ValueError("dim, negatives and epochs must be positive")
        if not self.lr > 0 or self.reg < 0 or self.early_stop_rel_tol < 0:
            raise ValueError("lr must be positive; reg and early_stop_rel_tol non-negative")


@dataclass(frozen=True)
class ComponentMask:
    use_object: bool = True
    use_time: bool = True

    @classmethod
    def named(cls, name: str) -> "ComponentMask":
        try:
            return MASKS[name]
        except KeyError:
            raise ValueError(f"unknown mask {name!r}; choose from {sorted(MASKS)}") from None

    @property
    def name(self) -> str:
        return {v: k for k, v in MASKS.items()}[self]


MASKS = {
    "full": ComponentMask(True, True),
    "plain": ComponentMask(False, False),
    "object": ComponentMask(True, False),
    "time": ComponentMask(False, True),
}


@dataclass
class EmbeddingStore:
    O: np.ndarray
    T: np.ndarray
    Lc: np.ndarray
    Ln: np.ndarray
    updates: int = 0

    @property
    def dim(self) -> int:
        return self.Lc.shape[1]

    @property
    def tied(self) -> bool:
        return self.Lc is self.Ln

    def matrices(self):
        return self.O, self.T, self.Lc, self.Ln

    def check_finite(self) -> None:
        for name, m in zip(("O", "T", "Lc", "Ln"), self.matrices()):
            if not np.isfinite(m).all():
                raise NumericalError(f"non-finite entries in {name}")


class TrainingInstance(NamedTuple):
    o: int
    t: int
    i: int
    j: int
    m: int


def derive_seed(seed: int, purpose: str) -> int:
    """Independent per-purpose seed (split, init, shuffle, negatives, monitor)."""
    tag = int.from_bytes(purpose.encode(), "little")
    return int(np.random.SeedSequence([seed & (2**64 - 1), tag]).generate_state(1, np.uint64)[0])


def init_store(sizes: Sequence[int], dim: int, seed: int, tied: bool = False) -> EmbeddingStore:
    """Draw O, T, Lc, Ln from N(0, 0.01).  ``tied`` makes Lc and Ln one array."""
    n_obj, n_time, n_cur, n_next = sizes
    if min(sizes) < 1 or dim < 1:
        raise ValueError(f"vocabulary sizes and dim must be >= 1, got {tuple(sizes)}, {dim}")
    if tied and n_cur != n_next:
        raise ValueError("tied store needs equal current/next vocabularies")
    rng = np.random.default_rng(seed)
    O = rng.normal(0.0, INIT_STD, (n_obj, dim))
    T = rng.normal(0.0, INIT_STD, (n_time, dim))
    Lc = rng.normal(0.0, INIT_STD, (n_cur, dim))
    Ln = Lc if tied else rng.normal(0.0, INIT_STD, (n_next, dim))
    return EmbeddingStore(O, T, Lc, Ln)


# --------------------------------------------------------------------------
# scoring

def conditional_vector(store: EmbeddingStore, mask: ComponentMask, o: int | None, t: int | None,
                       i: int) -> np.ndarray:
    """Sum of the enabled rows; ``None`` for o or t contributes zero."""
    v = store.Lc[i].copy()
    if mask.use_object and o is not None:
        v += store.O[o]
    if mask.use_time and t is not None:
        v += store.T[t]
    return v


def score(store: EmbeddingStore, cond: np.ndarray, j) -> np.ndarray | float:
    """Negative squared distance from ``Ln[j]`` to ``cond``; ``j`` may be an index array."""
    diff = store.Ln[j] - cond
    return -np.sum(diff * diff, axis=-1)


def probability(store: EmbeddingStore, mask: ComponentMask, o, t, i, candidates: Sequence[int]) -> np.ndarray:
    """Softmax of scores over ``candidates`` (normalized over that set only)."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    s = score(store, conditional_vector(store, mask, o, t, i), np.asarray(candidates))
    e = np.exp(s - s.max())
    return e / e.sum()


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


# --------------------------------------------------------------------------
# negative sampling

def sample_negative(rng: np.random.Generator, n_next: int, excluded) -> int:
    """Uniform next-location index outside ``excluded`` (rejection sampling)."""
    excluded = set(excluded)
    if len(excluded & set(range(n_next))) >= n_next:
        raise DataError("every next location is excluded; cannot sample a negative")
    while True:
        m = int(rng.integers(n_next))
        if m not in excluded:
            return m


class NegativeSampler:
    """Vectorized negative sampling for a fixed set of training quadruples.

    ``mode="context"`` excludes every next location seen with the exact
    ``(object, slot, current)`` context; ``mode="true"`` excludes only the
    quadruple's own next location.
    """

    def __init__(self, quads: IndexedQuads, n_next: int, mode: str = "context"):
        if mode not in ("context", "true"):
            raise ValueError(f"unknown exclusion mode {mode!r}")
        self.n_next = n_next
        self.mode = mode
        self.next = quads.next
        if mode == "context":
            ctx = np.stack([quads.objects, quads.times, quads.current], axis=1)
            _, self.ctx = np.unique(ctx, axis=0, return_inverse=True)
            self.ctx = self.ctx.ravel().astype(np.int64)
            self.keys = np.unique(self.ctx * n_next + quads.next)
            per_ctx = np.bincount(self.keys // n_next)
            if len(per_ctx) and per_ctx.max() >= n_next:
                raise DataError("a context has observed every next location; no negatives exist")
        elif n_next < 2:
            raise DataError("need at least two next locations to sample negatives")

    def _rejected(self, rows: np.ndarray, cand: np.ndarray) -> np.ndarray:
        if self.mode == "true":
            return cand == self.next[rows][:, None]
        keys = self.ctx[rows][:, None] * self.n_next + cand
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == keys

    def draw(self, rng: np.random.Generator, M: int, rows: np.ndarray | None = None) -> np.ndarray:
        """``(len(rows), M)`` negatives for the given quadruple rows (default all)."""
        if rows is None:
            rows = np.arange(len(self.next))
        cand = rng.integers(0, self.n_next, size=(len(rows), M))
        bad = self._rejected(rows, cand)
        while bad.any():
            r, c = np.nonzero(bad)
            cand[r, c] = rng.integers(0, self.n_next, size=len(r))
            bad[r, c] = self._rejected(rows[r], cand[r, c][:, None])[:, 0]
        return cand


# --------------------------------------------------------------------------
# objective and updates

def instance_objective(store: EmbeddingStore, mask: ComponentMask, inst: TrainingInstance, reg: float) -> float:
    """log sigmoid(z) minus reg times the squared norms of the touched rows."""
    o, t, i, j, m = inst
    v = conditional_vector(store, mask, o, t, i)
    z = np.sum((store.Ln[m] - v) ** 2) - np.sum((store.Ln[j] - v) ** 2)
    penalty = np.sum(store.Lc[i] ** 2) + np.sum(store.Ln[j] ** 2) + np.sum(store.Ln[m] ** 2)
    if mask.use_object:
        penalty += np.sum(store.O[o] ** 2)
    if mask.use_time:
        penalty += np.sum(store.T[t] ** 2)
    return float(log_sigmoid(z) - reg * penalty)


def sgd_step(store: EmbeddingStore, mask: ComponentMask, inst: TrainingInstance, lr: float, reg: float) -> None:
    """One simultaneous update of the five rows touched by ``inst``.

    All steps are computed from the pre-update values before any is applied,
    so aliased rows (tied Lc/Ln) accumulate both contributions.
    """
    o, t, i, j, m = inst
    O, T, Lc, Ln = store.matrices()
    v = conditional_vector(store, mask, o, t, i)
    z = np.sum((Ln[m] - v) ** 2) - np.sum((Ln[j] - v) ** 2)
    g = float(sigmoid(-z))  # 1 - sigmoid(z)
    pull = g * (Ln[j] - Ln[m])
    c = 2.0 * lr

    steps = [("Lc", Lc, i, c * (pull - reg * Lc[i])),
             ("Ln[next]", Ln, j, c * (g * (v - Ln[j]) - reg * Ln[j])),
             ("Ln[negative]", Ln, m, c * (g * (Ln[m] - v) - reg * Ln[m]))]
    if mask.use_object:
        steps.append(("O", O, o, c * (pull - reg * O[o])))
    if mask.use_time:
        steps.append(("T", T, t, c * (pull - reg * T[t])))
    for name, mat, row, delta in steps:
        if not np.isfinite(delta).all():
            raise NumericalError(f"non-finite update for {name} (learning rate too large?)")
    for _, mat, row, delta in steps:
        mat[row] += delta


_PARAM_NAMES = {1: "Lc", 2: "Ln[next]", 3: "Ln[negative]", 4: "O", 5: "T"}


@numba.njit(cache=True)
def _sgd_epoch(O, T, Lc, Ln, qo, qt, qi, qj, negs, order, use_o, use_t, lr, reg):
    D = Lc.shape[1]
    M = negs.shape[1]
    v = np.empty(D)
    d_lc = np.empty(D)
    d_lj = np.empty(D)
    d_lm = np.empty(D)
    d_o = np.empty(D)
    d_t = np.empty(D)
    c = 2.0 * lr
    count = 0
    for q in order:
        o = qo[q]
        t = qt[q]
        i = qi[q]
        j = qj[q]
        for k in range(M):
            m = negs[q, k]
            zj = 0.0
            zm = 0.0
            for d in range(D):
                x = Lc[i, d]
                if use_o:
                    x += O[o, d]
                if use_t:
                    x += T[t, d]
                v[d] = x
                a = Ln[j, d] - x
                b = Ln[m, d] - x
                zj += a * a
                zm += b * b
            z = zm - zj
            if z >= 0.0:
                e = math.exp(-z)
                g = e / (1.0 + e)
            else:
                g = 1.0 / (1.0 + math.exp(z))
            for d in range(D):
                pull = g * (Ln[j, d] - Ln[m, d])
                d_lc[d] = c * (pull - reg * Lc[i, d])
                d_lj[d] = c * (g * (v[d] - Ln[j, d]) - reg * Ln[j, d])
                d_lm[d] = c * (g * (Ln[m, d] - v[d]) - reg * Ln[m, d])
                if use_o:
                    d_o[d] = c * (pull - reg * O[o, d])
                if use_t:
                    d_t[d] = c * (pull - reg * T[t, d])
            for d in range(D):
                if not math.isfinite(d_lc[d]):
                    return count, 1
                if not math.isfinite(d_lj[d]):
                    return count, 2
                if not math.isfinite(d_lm[d]):
                    return count, 3
                if use_o and not math.isfinite(d_o[d]):
                    return count, 4
                if use_t and not math.isfinite(d_t[d]):
                    return count, 5
            for d in range(D):
                Lc[i, d] += d_lc[d]
                Ln[j, d] += d_lj[d]
                Ln[m, d] += d_lm[d]
                if use_o:
                    O[o, d] += d_o[d]
                if use_t:
                    T[t, d] += d_t[d]
            count += 1
    return count, 0


def objective(store: EmbeddingStore, mask: ComponentMask, quads: IndexedQuads, M: int, reg: float,
              rng: np.random.Generator, sampler: NegativeSampler | None = None) -> float:
    """Training objective with ``M`` fresh negatives per quadruple.

    The penalty covers every row touched at least once.  Used for monitoring.
    """
    n = len(quads)
    if n == 0:
        return 0.0
    if sampler is None:
        sampler = NegativeSampler(quads, store.Ln.shape[0])
    negs = sampler.draw(rng, M)
    v = store.Lc[quads.current].copy()
    if mask.use_object:
        v += store.O[quads.objects]
    if mask.use_time:
        v += store.T[quads.times]
    dj = np.sum((store.Ln[quads.next] - v) ** 2, axis=1)
    dm = np.sum((store.Ln[negs] - v[:, None, :]) ** 2, axis=2)
    total = float(np.sum(log_sigmoid(dm - dj[:, None])))

    def sq(mat, rows):
        rows = np.unique(rows)
        return float(np.sum(mat[rows] ** 2))

    if store.tied:
        penalty = sq(store.Ln, np.concatenate([quads.current, quads.next, negs.ravel()]))
    else:
        penalty = sq(store.Lc, quads.current) + sq(store.Ln, np.concatenate([quads.next, negs.ravel()]))
    if mask.use_object:
        penalty += sq(store.O, quads.objects)
    if mask.use_time:
        penalty += sq(store.T, quads.times)
    return total - reg * penalty


def train(quads: IndexedQuads, sizes: Sequence[int], hyper: Hyperparams = Hyperparams(),
          mask: ComponentMask = ComponentMask(), epoch_callback: Callable[[int, float], None] | None = None,
          exclude: str = "context", tied: bool = False, backend: str = "numba") -> EmbeddingStore:
    """Fit an embedding store on indexed training quadruples.

    Each epoch reshuffles the quadruples and applies one update per
    (quadruple, negative) pair, so a full run performs
    ``epochs * negatives * len(quads)`` updates unless stopped early.
    ``backend="python"`` routes every update through :func:`sgd_step`.
    """
    if len(quads) == 0:
        raise DataError("empty training set")
    if (quads.unseen).any():
        raise DataError("training quadruples must be fully indexed")
    if backend not in ("numba", "python"):
        raise ValueError(f"unknown backend {backend!r}")

    store = init_store(sizes, hyper.dim, derive_seed(hyper.seed, "init"), tied=tied)
    sampler = NegativeSampler(quads, sizes[3], exclude)
    rng_shuffle = np.random.default_rng(derive_seed(hyper.seed, "shuffle"))
    rng_neg = np.random.default_rng(derive_seed(hyper.seed, "negatives"))
    monitor_seed = derive_seed(hyper.seed, "monitor")

    prev = None
    for epoch in range(1, hyper.epochs + 1):
        order = rng_shuffle.permutation(len(quads))
        negs = sampler.draw(rng_neg, hyper.negatives)
        if backend == "numba":
            count, err = _sgd_epoch(*store.matrices(), quads.objects, quads.times, quads.current, quads.next,
                                    negs, order, mask.use_object, mask.use_time, hyper.lr, hyper.reg)
            store.updates += count
            if err:
                raise NumericalError(f"non-finite update for {_PARAM_NAMES[err]} in epoch {epoch} "
                                     "(learning rate too large?)")
        else:
            for q in order:
                for m in negs[q]:
                    inst = TrainingInstance(int(quads.objects[q]), int(quads.times[q]), int(quads.current[q]),
                                            int(quads.next[q]), int(m))
                    sgd_step(store, mask, inst, hyper.lr, hyper.reg)
                    store.updates += 1
        store.check_finite()

        # same monitor negatives every epoch, so epoch-to-epoch changes are not sampling noise
        ell = objective(store, mask, quads, hyper.negatives, hyper.reg, np.random.default_rng(monitor_seed), sampler)
        log.info("epoch %d: objective %.6g", epoch, ell)
        if epoch_callback is not None:
            epoch_callback(epoch, ell)
        if hyper.early_stop_rel_tol > 0 and prev is not None and prev != 0:
            if abs(ell - prev) / abs(prev) < hyper.early_stop_rel_tol:
                log.info("stopping after epoch %d", epoch)
                break
        prev = ell
    return store


# --------------------------------------------------------------------------
# fitted model bundle

@dataclass
class MPEModel:
    """Everything needed to answer queries: embeddings, vocabularies, candidates."""

    store: EmbeddingStore
    vocab: Vocabulary
    candidates: CandidateIndex
    popularity: np.ndarray  # training count per next-location index
    mask: ComponentMask = ComponentMask()
    hyper: Hyperparams = Hyperparams()
    history: list = field(default_factory=list)

    def params(self) -> dict:
        return {"mask": self.mask.name, "tied": self.vocab.tied, **asdict(self.hyper)}


def fit_mpe(train_quads: Sequence, hyper: Hyperparams = Hyperparams(), mask: ComponentMask = ComponentMask(),
            tie_locations: bool = False, exclude: str = "context", backend: str = "numba",
            epoch_callback: Callable[[int, float], None] | None = None) -> MPEModel:
    """Build vocabularies from token quadruples and train."""
    vocab, candidates, indexed = build_vocab_and_index(train_quads, tie_locations=tie_locations)
    history = []

    def record(epoch, ell):
        history.append((epoch, ell))
        if epoch_callback is not None:
            epoch_callback(epoch, ell)

    store = train(indexed, vocab.sizes, hyper, mask, record, exclude=exclude, tied=tie_locations, backend=backend)
    popularity = np.bincount(indexed.next, minlength=len(vocab.next))
    return MPEModel(store, vocab, candidates, popularity, mask, hyper, history)
