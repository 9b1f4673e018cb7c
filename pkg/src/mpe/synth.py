"""Road-network-constrained synthetic trajectories and corpus diagnostics.

Objects random-walk a sparse directed graph.  Edge choice at node ``u`` in
slot ``t`` is proportional to ``w(u,v) * (1 + s_o * pref_o(u,v)) *
(1 + s_t * pref_t(u,v))``, so ``object_signal`` and ``time_signal`` control how
much the object identity and the time slot tell about the next location.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import Record, TimeSlotting, build_quadruples
from .model import derive_seed

EPOCH_START = 1451606400  # 2016-01-01T00:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    n_locations: int = 50
    out_degree: int = 3
    n_objects: int = 20
    n_slots: int = 10
    records_per_object: int = 1000
    seed: int = 0
    object_signal: float = 0.5
    time_signal: float = 0.5
    slot_minutes: int = 30
    window_start_minute: int = 7 * 60

    def __post_init__(self):
        if not 0 <= self.out_degree < self.n_locations:
            raise ValueError(f"out_degree must be in [0, n_locations), got {self.out_degree}")
        if not (0 <= self.object_signal <= 1 and 0 <= self.time_signal <= 1):
            raise ValueError("signal strengths must lie in [0, 1]")
        if min(self.n_objects, self.n_slots, self.records_per_object) < 1:
            raise ValueError("n_objects, n_slots and records_per_object must be positive")
        self.slotting  # validates the window

    @property
    def slotting(self) -> TimeSlotting:
        return TimeSlotting(self.slot_minutes, self.window_start_minute,
                            self.window_start_minute + self.n_slots * self.slot_minutes)


@dataclass
class RoadGraph:
    successors: list  # node -> sorted np.ndarray of successor nodes
    weights: list     # node -> np.ndarray of positive edge weights, aligned with successors

    @property
    def n(self) -> int:
        return len(self.successors)

    @property
    def n_edges(self) -> int:
        return sum(len(s) for s in self.successors)

    def offsets(self) -> np.ndarray:
        """Start of each node's edges in a flat edge numbering."""
        return np.concatenate([[0], np.cumsum([len(s) for s in self.successors])])

    def edge_set(self) -> set:
        return {(u, int(v)) for u, succ in enumerate(self.successors) for v in succ}

    def to_json(self) -> dict:
        return {"successors": [s.tolist() for s in self.successors],
                "weights": [w.tolist() for w in self.weights]}


def location_token(i: int) -> str:
    return f"L{i:04d}"


def object_token(i: int) -> str:
    return f"o{i:04d}"


def generate_graph(config: SynthConfig) -> RoadGraph:
    """Random out-neighbours per node plus the ring edge ``i -> i+1``."""
    n, deg = config.n_locations, config.out_degree
    if not 0 <= deg < n:
        raise ValueError(f"out_degree must be in [0, {n}), got {deg}")
    rng = np.random.default_rng(derive_seed(config.seed, "graph"))
    successors, weights = [], []
    for u in range(n):
        picks = rng.choice(n - 1, size=deg, replace=False)
        picks = np.where(picks >= u, picks + 1, picks)  # skip self
        succ = np.unique(np.append(picks, (u + 1) % n))
        successors.append(succ)
        weights.append(rng.uniform(0.9, 1.1, size=len(succ)))
    return RoadGraph(successors, weights)


PREFERRED_SHARE = 0.3


def _target_preferences(graph: RoadGraph, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    # each row favours a random subset of destinations; pref(u, v) depends on v only
    liked = (rng.random((n_rows, graph.n)) < PREFERRED_SHARE).astype(float)
    targets = np.concatenate(graph.successors)
    return liked[:, targets]


def preference_tables(graph: RoadGraph, config: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-object and per-slot edge preferences in {0, 1}, indexed by flat edge id.

    Each object (and each slot) likes a random ~30% of the locations; an edge
    has preference 1 when its destination is liked.
    """
    rng_o = np.random.default_rng(derive_seed(config.seed, "object-pref"))
    rng_t = np.random.default_rng(derive_seed(config.seed, "slot-pref"))
    return (_target_preferences(graph, config.n_objects, rng_o),
            _target_preferences(graph, config.n_slots, rng_t))


def transition_probs(graph: RoadGraph, config: SynthConfig, pref_o: np.ndarray, pref_t: np.ndarray,
                     obj: int, slot: int, u: int) -> np.ndarray:
    lo, hi = graph.offsets()[u:u + 2]
    w = graph.weights[u] * (1 + config.object_signal * pref_o[obj, lo:hi]) \
        * (1 + config.time_signal * pref_t[slot, lo:hi])
    return w / w.sum()


def generate_trajectories(graph: RoadGraph, config: SynthConfig) -> Iterator[Record]:
    """Stream records object by object; each object uses its own derived RNG."""
    pref_o, pref_t = preference_tables(graph, config)
    slotting = config.slotting
    for obj in range(config.n_objects):
        rng = np.random.default_rng(derive_seed(config.seed, f"walk-{obj}"))
        u = int(rng.integers(graph.n))
        step = int(rng.integers(config.n_slots))
        cdfs = {}
        for _ in range(config.records_per_object):
            day, slot = divmod(step, config.n_slots)
            minute = slotting.window_start_minute + slot * slotting.slot_minutes
            yield Record(object_token(obj), EPOCH_START + day * 86400 + minute * 60, location_token(u))
            cdf = cdfs.get((slot, u))
            if cdf is None:
                cdf = cdfs[(slot, u)] = np.cumsum(transition_probs(graph, config, pref_o, pref_t, obj, slot, u))
            pick = min(bisect.bisect_right(cdf, rng.random()), len(cdf) - 1)
            u = int(graph.successors[u][pick])
            step += 1


def synth_quadruples(config: SynthConfig) -> tuple[RoadGraph, list]:
    graph = generate_graph(config)
    quads = build_quadruples(generate_trajectories(graph, config), config.slotting)
    return graph, quads


def phantom_rate(quads: Sequence[tuple]) -> float:
    """Share of distinct observed sequences ``a -> b -> c`` whose shortcut ``a -> c`` is observed.

    Sequences come from consecutive quadruples of one object that chain
    (the first's next location is the second's current location).
    """
    transitions = {(q[2], q[3]) for q in quads}
    sequences = set()
    for p, q in zip(quads, quads[1:]):
        if p[0] == q[0] and p[3] == q[2]:
            sequences.add((p[2], p[3], q[3]))
    if not sequences:
        return 0.0
    return sum((a, c) in transitions for a, _, c in sequences) / len(sequences)


def write_sidecar(graph: RoadGraph, config: SynthConfig, stream) -> None:
    json.dump({"config": asdict(config), "graph": graph.to_json()}, stream, indent=1, sort_keys=True)
    stream.write("\n")
