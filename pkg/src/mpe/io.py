"""Model file, hyperparameter sidecar and embedding TSV export.

Model file layout (all integers and floats little-endian)::

    b"MPEMODEL"  u32 version  u32 D  u64 n_objects n_slots n_current n_next  u32 flags
    4 x vocabulary block:  u64 byte length, UTF-8 tokens joined by "\\n"
    O, T, Lc, Ln          row-major f64 matrices
    b"CAND" u64 entries;  per entry: u32 current, u32 count, count x u32 next
    n_next x u64          training count of each next location

``flags`` bits: 1 use_object, 2 use_time, 4 tied current/next locations.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, TextIO

import numpy as np

from .data import CandidateIndex, TokenMap, Vocabulary
from .model import ComponentMask, EmbeddingStore, Hyperparams, MPEModel, derive_seed

MAGIC = b"MPEMODEL"
VERSION = 1
_HEAD = struct.Struct("<II4QI")
KINDS = ("object", "time", "loc_current", "loc_next")


class ModelFormatError(ValueError):
    pass


def _write_tokens(f: BinaryIO, tokens) -> None:
    blob = "\n".join(str(t) for t in tokens).encode("utf-8")
    f.write(struct.pack("<Q", len(blob)))
    f.write(blob)


def _read_tokens(f: BinaryIO, n: int, cast=str) -> list:
    (length,) = struct.unpack("<Q", _read(f, 8))
    text = _read(f, length).decode("utf-8")
    tokens = [cast(t) for t in text.split("\n")] if n else []
    if len(tokens) != n:
        raise ModelFormatError(f"expected {n} tokens, found {len(tokens)}")
    return tokens


def _read(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ModelFormatError("truncated model file")
    return data


def save_model(model: MPEModel, f: BinaryIO) -> None:
    store, vocab = model.store, model.vocab
    flags = model.mask.use_object | (model.mask.use_time << 1) | (vocab.tied << 2)
    f.write(MAGIC)
    f.write(_HEAD.pack(VERSION, store.dim, *vocab.sizes, flags))
    for m in (vocab.objects, vocab.times, vocab.current, vocab.next):
        _write_tokens(f, m.tokens)
    for mat in store.matrices():
        f.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    f.write(b"CAND")
    f.write(struct.pack("<Q", len(model.candidates.table)))
    for cur, nexts in sorted(model.candidates.table.items()):
        f.write(struct.pack("<II", cur, len(nexts)))
        f.write(np.asarray(nexts, dtype="<u4").tobytes())
    f.write(np.asarray(model.popularity, dtype="<u8").tobytes())


def load_model(f: BinaryIO, hyper: Hyperparams | None = None) -> MPEModel:
    if _read(f, len(MAGIC)) != MAGIC:
        raise ModelFormatError("not an MPE model file")
    version, dim, n_obj, n_time, n_cur, n_next, flags = _HEAD.unpack(_read(f, _HEAD.size))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    tied = bool(flags & 4)
    vocab = Vocabulary(TokenMap(_read_tokens(f, n_obj)), TokenMap(_read_tokens(f, n_time, int)),
                       TokenMap(_read_tokens(f, n_cur)), TokenMap(_read_tokens(f, n_next)), tied=tied)
    if tied:
        vocab.next = vocab.current

    def matrix(rows):
        return np.frombuffer(_read(f, rows * dim * 8), dtype="<f8").reshape(rows, dim).astype(np.float64)

    O, T, Lc, Ln = matrix(n_obj), matrix(n_time), matrix(n_cur), matrix(n_next)
    store = EmbeddingStore(O, T, Lc, Lc if tied else Ln)

    if _read(f, 4) != b"CAND":
        raise ModelFormatError("missing candidate section")
    (entries,) = struct.unpack("<Q", _read(f, 8))
    table = {}
    for _ in range(entries):
        cur, count = struct.unpack("<II", _read(f, 8))
        table[cur] = np.frombuffer(_read(f, 4 * count), dtype="<u4").astype(int).tolist()
    popularity = np.frombuffer(_read(f, 8 * n_next), dtype="<u8").astype(np.int64)
    mask = ComponentMask(bool(flags & 1), bool(flags & 2))
    return MPEModel(store, vocab, CandidateIndex(table), popularity, mask, hyper or Hyperparams(dim=dim))


def sidecar_path(model_path: str | Path) -> Path:
    return Path(str(model_path) + ".json")


def write_params(model: MPEModel, stream: TextIO, extra: dict | None = None) -> None:
    """Plain-text (JSON) record of everything needed to reproduce the model."""
    seed = model.hyper.seed
    doc = {
        "format": f"mpe-model/{VERSION}",
        **model.params(),
        "vocab_sizes": dict(zip(KINDS, model.vocab.sizes)),
        "derived_seeds": {p: derive_seed(seed, p) for p in ("init", "shuffle", "negatives", "monitor")},
        **(extra or {}),
    }
    json.dump(doc, stream, indent=2, sort_keys=True)
    stream.write("\n")


def read_params(stream: TextIO) -> Hyperparams:
    doc = json.load(stream)
    fields = Hyperparams.__dataclass_fields__
    return Hyperparams(**{k: doc[k] for k in fields if k in doc})


def export_embeddings(model: MPEModel, stream: TextIO, kinds=KINDS) -> int:
    """Write ``kind, token, v_0 .. v_{D-1}`` rows; returns the number of rows."""
    vocab, store = model.vocab, model.store
    sources = {
        "object": (vocab.objects, store.O),
        "time": (vocab.times, store.T),
        "loc_current": (vocab.current, store.Lc),
        "loc_next": (vocab.next, store.Ln),
    }
    stream.write("\t".join(["kind", "token", *(f"v_{d}" for d in range(store.dim))]) + "\n")
    rows = 0
    for kind in kinds:
        tokens, mat = sources[kind]
        for tok, vec in zip(tokens.tokens, mat):
            stream.write("\t".join([kind, str(tok), *(repr(float(x)) for x in vec)]) + "\n")
            rows += 1
    return rows
