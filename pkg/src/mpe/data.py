"""Trajectory ingestion: parsing, time/space discretization, quadruples, splits.

Records are ``(object_id, timestamp, location_id)`` observations.  A quadruple
``(object, slot, current, next)`` pairs a record with the object's following
location and is the unit the models are trained on.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Hashable, Iterable, Sequence, TextIO

import numpy as np

TokenQuad = tuple  # (object: str, slot: int, current: str, next: str)


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class OutOfBoundsError(DataError):
    pass


@dataclass(frozen=True)
class Record:
    object_id: str
    timestamp: float
    location_id: str

    def __post_init__(self):
        if not self.object_id or not self.location_id:
            raise DataError("object_id and location_id must be non-empty")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise DataError(f"invalid timestamp {self.timestamp!r}")


@dataclass(frozen=True)
class GpsRecord:
    """A raw GPS ping; mapped to a :class:`Record` by :func:`map_gps_to_cell`."""

    object_id: str
    timestamp: float
    lat: float
    lon: float


@dataclass(frozen=True)
class TimeSlotting:
    slot_minutes: int = 30
    window_start_minute: int = 0
    window_end_minute: int = 1440

    def __post_init__(self):
        span = self.window_end_minute - self.window_start_minute
        if self.slot_minutes <= 0 or span <= 0 or span % self.slot_minutes:
            raise ValueError(
                f"window [{self.window_start_minute}, {self.window_end_minute}) "
                f"is not a positive multiple of {self.slot_minutes} minutes"
            )
        if self.window_start_minute < 0 or self.window_end_minute > 1440:
            raise ValueError("window must lie within one day")

    @property
    def n_slots(self) -> int:
        return (self.window_end_minute - self.window_start_minute) // self.slot_minutes


# daytime VPR setting: 07:00-17:00 in 30 minute buckets
VPR_SLOTTING = TimeSlotting(30, 7 * 60, 17 * 60)
TAXI_SLOTTING = TimeSlotting(15, 0, 1440)


@dataclass(frozen=True)
class GridSpec:
    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float
    cell_size_deg: float

    def __post_init__(self):
        if not (self.min_lat < self.max_lat and self.min_lon < self.max_lon):
            raise ValueError("empty bounding box")
        if not self.cell_size_deg > 0:
            raise ValueError("cell_size_deg must be positive")

    def _count(self, extent: float) -> int:
        # tolerance keeps e.g. 2.0 / 1.0 from rounding up to 3 cells
        return max(1, math.ceil(extent / self.cell_size_deg - 1e-9))

    @property
    def n_rows(self) -> int:
        return self._count(self.max_lat - self.min_lat)

    @property
    def n_cols(self) -> int:
        return self._count(self.max_lon - self.min_lon)

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """Parse ``min_lat,max_lat,min_lon,max_lon,cell_size``."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError(f"grid needs 5 comma separated numbers, got {text!r}")
        return cls(*parts)


# --------------------------------------------------------------------------
# parsing

def _parse_timestamp(text: str, iso: bool) -> float:
    text = text.strip()
    if iso:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    value = float(text)
    return int(value) if value.is_integer() else value


def _looks_iso(text: str) -> bool:
    try:
        float(text)
        return False
    except ValueError:
        pass
    try:
        datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
        return True
    except ValueError:
        return False


_HEADER_TIME_NAMES = {"timestamp", "time", "ts", "datetime"}


def parse_records(stream: TextIO | bytes | str, fmt: str = "triple-csv") -> list:
    """Parse a triple-csv or gps-csv stream.

    Returns :class:`Record` objects for ``triple-csv`` and :class:`GpsRecord`
    objects for ``gps-csv``, in input order.  A header row is detected by its
    timestamp column name.  Timestamps are integer/float epoch seconds or
    ISO-8601; the kind is fixed by the first data row of the stream.
    """
    if fmt not in ("triple-csv", "gps-csv"):
        raise ValueError(f"unknown format {fmt!r}")
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    n_fields = 3 if fmt == "triple-csv" else 4

    out = []
    iso = None
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row or all(not f.strip() for f in row):
            continue
        if lineno == 1 and len(row) == n_fields and row[1].strip().lower() in _HEADER_TIME_NAMES:
            continue
        if len(row) != n_fields:
            raise DataError(f"line {lineno}: expected {n_fields} fields, got {len(row)}")
        obj = row[0].strip()
        try:
            if iso is None:
                iso = _looks_iso(row[1])
            ts = _parse_timestamp(row[1], iso)
            if fmt == "triple-csv":
                out.append(Record(obj, ts, row[2].strip()))
            else:
                rec = GpsRecord(obj, ts, float(row[2]), float(row[3]))
                if not obj or not (math.isfinite(ts) and ts >= 0):
                    raise DataError("bad object or timestamp")
                out.append(rec)
        except (ValueError, OverflowError) as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return out


def write_records(records: Iterable[Record], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    for r in records:
        writer.writerow([r.object_id, repr(r.timestamp) if isinstance(r.timestamp, float) else r.timestamp,
                         r.location_id])


PORTO_SAMPLE_SECONDS = 15


def read_porto_trips(stream: TextIO, objects: set | None = None) -> Iterable[GpsRecord]:
    """GPS pings from the Porto taxi ``train.csv`` (one POLYLINE of [lon, lat] per trip).

    Points within a trip are 15 s apart, starting at the trip's TIMESTAMP.
    ``objects`` restricts the output to those TAXI_IDs.
    """
    for row in csv.DictReader(stream):
        taxi = row["TAXI_ID"]
        if objects is not None and taxi not in objects:
            continue
        if row.get("MISSING_DATA", "False") == "True":
            continue
        start = int(row["TIMESTAMP"])
        for n, (lon, lat) in enumerate(json.loads(row["POLYLINE"])):
            yield GpsRecord(taxi, start + n * PORTO_SAMPLE_SECONDS, float(lat), float(lon))


def map_gps_to_cell(lat: float, lon: float, grid: GridSpec) -> str:
    if not (grid.min_lat <= lat <= grid.max_lat and grid.min_lon <= lon <= grid.max_lon):
        raise OutOfBoundsError(f"point ({lat}, {lon}) outside grid")
    n_rows, n_cols = grid.n_rows, grid.n_cols
    row = min(int(math.floor((lat - grid.min_lat) / grid.cell_size_deg)), n_rows - 1)
    col = min(int(math.floor((lon - grid.min_lon) / grid.cell_size_deg)), n_cols - 1)
    return f"C{row * n_cols + col}"


def gps_to_records(pings: Iterable[GpsRecord], grid: GridSpec) -> list[Record]:
    """Map pings onto grid cells, skipping (with a warning) those outside the box."""
    out = []
    skipped = 0
    for p in pings:
        try:
            out.append(Record(p.object_id, p.timestamp, map_gps_to_cell(p.lat, p.lon, grid)))
        except OutOfBoundsError:
            skipped += 1
    if skipped:
        warnings.warn(f"skipped {skipped} GPS points outside the grid", stacklevel=2)
    return out


def discretize_time(timestamp: float, slotting: TimeSlotting, tz_offset_minutes: int = 0) -> int | None:
    """Slot index of ``timestamp``, or None when it falls outside the window."""
    seconds_of_day = (timestamp + tz_offset_minutes * 60) % 86400
    minute = int(seconds_of_day // 60)
    if not slotting.window_start_minute <= minute < slotting.window_end_minute:
        return None
    return (minute - slotting.window_start_minute) // slotting.slot_minutes


# --------------------------------------------------------------------------
# quadruples

def build_quadruples(
    records: Iterable[Record],
    slotting: TimeSlotting,
    max_gap_seconds: float = math.inf,
    tz_offset_minutes: int = 0,
    drop_self_loops: bool = False,
    collapse_repeats: bool = False,
) -> list[TokenQuad]:
    """Join each record with the same object's next record.

    Output is ordered by object id, then time.  The slot is the one of the
    earlier record; pairs whose earlier record is outside the time window, or
    whose gap exceeds ``max_gap_seconds``, are skipped.  ``collapse_repeats``
    keeps only the first of a run of records at the same location (dense GPS
    pings of a slow vehicle), applied before pairing.
    """
    by_object: dict[str, list[Record]] = defaultdict(list)
    for r in records:
        by_object[r.object_id].append(r)

    quads = []
    for obj in sorted(by_object):
        seq = sorted(by_object[obj], key=lambda r: (r.timestamp, r.location_id))
        if collapse_repeats:
            seq = [r for n, r in enumerate(seq) if n == 0 or r.location_id != seq[n - 1].location_id]
        for a, b in zip(seq, seq[1:]):
            if b.timestamp - a.timestamp > max_gap_seconds:
                continue
            slot = discretize_time(a.timestamp, slotting, tz_offset_minutes)
            if slot is None:
                continue
            if drop_self_loops and a.location_id == b.location_id:
                continue
            quads.append((obj, slot, a.location_id, b.location_id))
    return quads


def filter_by_transition_frequency(quads: Sequence[TokenQuad], threshold: int) -> list[TokenQuad]:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    counts = Counter((q[2], q[3]) for q in quads)
    return [q for q in quads if counts[(q[2], q[3])] >= threshold]


def split(quads: Sequence, ratios: Sequence[float] = (8, 1, 1), seed: int = 0):
    """Shuffle with a seeded RNG and cut into train/validation/test.

    Validation and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    n = len(quads)
    if n < 3:
        raise DataError(f"need at least 3 quadruples to split, got {n}")
    total = float(sum(ratios))
    n_val = int(math.floor(n * ratios[1] / total))
    n_test = int(math.floor(n * ratios[2] / total))
    n_train = n - n_val - n_test

    perm = np.random.default_rng(seed).permutation(n)
    items = [quads[i] for i in perm]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


def parse_split(text: str) -> tuple[float, float, float]:
    parts = tuple(float(p) for p in text.split(":"))
    if len(parts) != 3:
        raise ValueError(f"split must look like 8:1:1, got {text!r}")
    return parts


# --------------------------------------------------------------------------
# vocabularies and candidate transitions

class TokenMap:
    """Bijective token <-> dense index map."""

    def __init__(self, tokens: Iterable[Hashable] = ()):
        self.tokens: list = []
        self._index: dict = {}
        for t in tokens:
            self.add(t)

    def add(self, token) -> int:
        idx = self._index.get(token)
        if idx is None:
            idx = self._index[token] = len(self.tokens)
            self.tokens.append(token)
        return idx

    def index_of(self, token, default: int | None = None) -> int | None:
        return self._index.get(token, default)

    def __getitem__(self, token) -> int:
        return self._index[token]

    def token_of(self, idx: int):
        return self.tokens[idx]

    def __contains__(self, token) -> bool:
        return token in self._index

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenMap) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"TokenMap({len(self)} tokens)"


@dataclass
class Vocabulary:
    objects: TokenMap
    times: TokenMap
    current: TokenMap
    next: TokenMap
    tied: bool = False

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        return len(self.objects), len(self.times), len(self.current), len(self.next)


@dataclass
class CandidateIndex:
    """current-location index -> sorted, duplicate-free next-location indices."""

    table: dict[int, list[int]] = field(default_factory=dict)

    def __call__(self, current: int) -> list[int]:
        return self.table.get(current, [])

    def support(self) -> list[int]:
        """All next locations observed in training (union of candidate lists)."""
        return sorted({j for js in self.table.values() for j in js})


@dataclass
class IndexedQuads:
    """Quadruples as parallel int arrays; ``-1`` marks a token unseen in training."""

    objects: np.ndarray
    times: np.ndarray
    current: np.ndarray
    next: np.ndarray

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def unseen(self) -> np.ndarray:
        return (self.objects < 0) | (self.times < 0) | (self.current < 0) | (self.next < 0)


def _sorted_tokens(values) -> list:
    return sorted(set(values), key=lambda v: (str(type(v)), v))


def build_vocab_and_index(train: Sequence[TokenQuad], tie_locations: bool = False):
    """Vocabularies, candidate index and indexed form of the training quadruples.

    Current-role and next-role locations get separate vocabularies.  With
    ``tie_locations`` both roles share one vocabulary over the union of tokens
    (used for the shared-embedding ablation).
    """
    if not train:
        raise DataError("empty training set")
    objects = TokenMap(_sorted_tokens(q[0] for q in train))
    times = TokenMap(_sorted_tokens(q[1] for q in train))
    if tie_locations:
        shared = TokenMap(_sorted_tokens([q[2] for q in train] + [q[3] for q in train]))
        current, nxt = shared, shared
    else:
        current = TokenMap(_sorted_tokens(q[2] for q in train))
        nxt = TokenMap(_sorted_tokens(q[3] for q in train))
    vocab = Vocabulary(objects, times, current, nxt, tied=tie_locations)

    indexed = index_quadruples(vocab, train)
    pairs: dict[int, set] = defaultdict(set)
    for i, j in zip(indexed.current.tolist(), indexed.next.tolist()):
        pairs[i].add(j)
    candidates = CandidateIndex({i: sorted(js) for i, js in sorted(pairs.items())})
    return vocab, candidates, indexed


def index_quadruples(vocab: Vocabulary, quads: Sequence[TokenQuad]) -> IndexedQuads:
    cols = [[], [], [], []]
    maps = (vocab.objects, vocab.times, vocab.current, vocab.next)
    for q in quads:
        for col, m, tok in zip(cols, maps, q):
            col.append(m.index_of(tok, -1))
    return IndexedQuads(*(np.asarray(c, dtype=np.int64) for c in cols))


# --------------------------------------------------------------------------
# quadruple file

QUAD_HEADER = ["object", "slot", "current", "next"]


def write_quadruples(quads: Iterable[TokenQuad], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(QUAD_HEADER)
    for q in quads:
        writer.writerow(q)


def read_quadruples(stream: TextIO) -> list[TokenQuad]:
    out = []
    for lineno, row in enumerate(csv.reader(stream), start=1):
        if not row:
            continue
        if lineno == 1 and row == QUAD_HEADER:
            continue
        if len(row) != 4:
            raise DataError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            slot = int(row[1])
        except ValueError:
            raise DataError(f"line {lineno}: slot {row[1]!r} is not an integer") from None
        out.append((row[0], slot, row[2], row[3]))
    return out
