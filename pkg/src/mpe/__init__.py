"""Mobility pattern embeddings for next-location prediction."""
from .data import (CandidateIndex, GridSpec, Record, TimeSlotting, Vocabulary, build_quadruples,
                   build_vocab_and_index, discretize_time, filter_by_transition_frequency, map_gps_to_cell,
                   parse_records, split)
from .model import ComponentMask, EmbeddingStore, Hyperparams, MPEModel, fit_mpe, train
from .predict import Query, RankedPrediction, predict_batch, rank_next

__version__ = "0.1.0"

__all__ = [
    "CandidateIndex", "GridSpec", "Record", "TimeSlotting", "Vocabulary", "build_quadruples",
    "build_vocab_and_index", "discretize_time", "filter_by_transition_frequency", "map_gps_to_cell",
    "parse_records", "split", "ComponentMask", "EmbeddingStore", "Hyperparams", "MPEModel", "fit_mpe",
    "train", "Query", "RankedPrediction", "predict_batch", "rank_next",
]
