"""Chunk-score aggregation and subject-level diagnosis.

Three weightings over a recording's chunk probabilities: a flat
average, linearly increasing weights w_i = 2i / (n(n+1)) that emphasize
late chunks, and the reversed variant that emphasizes early chunks.
Weights always sum to one, so aggregation is convex.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, SubjectRecord
from .chunker import chunk_plan, extract_chunks
from .fusion import FusionModel, fuse_from_embeddings, member_embeddings, metadata_vector


class EmptyList(ValueError):
    """Aggregation over zero chunks is undefined."""


class AggregationScheme(str, enum.Enum):
    AVERAGE = "average"
    LINEAR_POSITIVE = "linear_positive"
    LINEAR_NEGATIVE = "linear_negative"

    @staticmethod
    def parse(text: str) -> "AggregationScheme":
        key = text.strip().lower()
        aliases = {
            "average": AggregationScheme.AVERAGE,
            "linpos": AggregationScheme.LINEAR_POSITIVE,
            "linear_positive": AggregationScheme.LINEAR_POSITIVE,
            "linneg": AggregationScheme.LINEAR_NEGATIVE,
            "linear_negative": AggregationScheme.LINEAR_NEGATIVE,
        }
        if key not in aliases:
            raise ValueError(f"unknown scheme {text!r}")
        return aliases[key]


def scheme_weights(n: int, scheme: AggregationScheme) -> np.ndarray:
    """Chunk weights for a length-n sequence; they sum to 1 exactly up
    to float rounding."""
    if n < 1:
        raise EmptyList("no chunks to weight")
    if scheme == AggregationScheme.AVERAGE:
        return np.full(n, 1.0 / n)
    i = np.arange(1, n + 1, dtype=np.float64)
    weights = 2.0 * i / (n * (n + 1.0))
    if scheme == AggregationScheme.LINEAR_NEGATIVE:
        weights = weights[::-1].copy()
    return weights


def aggregate(probs, scheme: AggregationScheme) -> float:
    probs = np.asarray(list(probs), dtype=np.float64)
    if probs.size == 0:
        raise EmptyList("no chunk probabilities")
    return float(np.dot(scheme_weights(probs.size, scheme), probs))


@dataclass
class Diagnosis:
    subject_id: str
    probability: float  # aggregated P(positive)
    label: str          # "positive" | "negative"
    threshold: float
    scheme: str
    chunk_probabilities: list = field(default_factory=list)
    chunk_size: float = 0.0
    stride: float = 0.0

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "probability": self.probability,
            "label": self.label,
            "threshold": self.threshold,
            "scheme": self.scheme,
            "chunk_probabilities": list(self.chunk_probabilities),
            "chunk_size": self.chunk_size,
            "stride": self.stride,
        }


def ensemble_chunk_probs(clip: AudioClip, fusion: FusionModel, members: list,
                         metadata: np.ndarray, params, chunk_size: float,
                         stride: float, mask=None) -> list:
    """P(positive) per chunk for one recording through the ensemble."""
    plan = chunk_plan(clip.duration, chunk_size, stride)
    chunks = extract_chunks(clip, plan, params, mask)
    emb = np.concatenate([member_embeddings(m, chunks) for m in members], axis=1)
    meta = np.broadcast_to(np.asarray(metadata, dtype=np.float64),
                           (len(chunks), len(metadata))).copy()
    probs, _ = fuse_from_embeddings(fusion, emb, meta)
    return [float(p) for p in probs[:, 1]]


def decide(probability: float, threshold: float) -> str:
    """Ties go to the positive side: screening prefers a false alarm
    over a miss."""
    return "positive" if probability >= threshold else "negative"


def diagnose(record: SubjectRecord, clip: AudioClip, fusion: FusionModel,
             members: list, params, chunk_size: float, stride: float,
             scheme: AggregationScheme, threshold: float = 0.5,
             mask=None) -> Diagnosis:
    """Chunk the recording, score every chunk, aggregate, threshold."""
    metadata = metadata_vector(record.gender, record.age)
    chunk_probs = ensemble_chunk_probs(clip, fusion, members, metadata, params,
                                       chunk_size, stride, mask)
    probability = aggregate(chunk_probs, scheme)
    return Diagnosis(
        record.subject_id, probability, decide(probability, threshold),
        threshold, scheme.value, chunk_probs, chunk_size, stride,
    )
