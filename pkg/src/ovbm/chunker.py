"""Overlapping chunk scheduling and per-chunk feature extraction.

A recording of any length is cut into fixed-size windows placed at
stride multiples starting at zero; the tail is zero-padded so the last
window is always whole. With the default 2 s stride a 78 s recording at
chunk size 2 yields exactly 39 chunks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .audio_io import AudioClip, pad_to
from .degradation import PoissonMaskConfig, apply_poisson_mask
from .mfcc import MfccImage, MfccParams, mfcc

DEFAULT_STRIDE = 2.0


@dataclass
class ChunkPlan:
    chunk_size: float
    stride: float
    intervals: list = field(default_factory=list)  # [(start_s, end_s), ...]

    @property
    def count(self) -> int:
        return len(self.intervals)


@dataclass
class Chunk:
    index: int
    span: tuple
    features: MfccImage
    masked: bool = False


def chunk_plan(duration: float, chunk_size: float,
               stride: float = DEFAULT_STRIDE) -> ChunkPlan:
    """Plan window placement over `duration` seconds.

    Windows start at 0, stride, 2*stride, ...; the count is the smallest
    c with (c-1)*stride + chunk_size >= duration, i.e. the duration is
    first rounded up so (padded - chunk_size) is a stride multiple.
    Anything shorter than one window gets a single zero-padded window.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    if chunk_size <= 0 or stride <= 0:
        raise ValueError("chunk_size and stride must be positive")
    if duration <= chunk_size:
        count = 1
    else:
        count = 1 + math.ceil((duration - chunk_size) / stride)
    intervals = [(i * stride, i * stride + chunk_size) for i in range(count)]
    return ChunkPlan(chunk_size, stride, intervals)


def extract_chunks(clip: AudioClip, plan: ChunkPlan, params: MfccParams,
                   mask: PoissonMaskConfig | None = None) -> list:
    """Slice the clip per plan and featurize each window.

    The clip is zero-padded out to the final window's end, so every
    chunk image has the same frame count. An optional Poisson mask is
    applied to each image after extraction.
    """
    if not plan.intervals:
        raise ValueError("plan has no intervals")
    rate = clip.sample_rate
    final_end = plan.intervals[-1][1]
    padded = pad_to(clip, final_end) if final_end > clip.duration else clip
    chunks = []
    for i, (start, end) in enumerate(plan.intervals):
        a, b = int(round(start * rate)), int(round(end * rate))
        segment = AudioClip(padded.samples[a:b].copy(), rate)
        image = mfcc(segment, params, source_span=(start, end))
        if mask is not None:
            image = apply_poisson_mask(image, mask)
        chunks.append(Chunk(i, (start, end), image, masked=mask is not None))
    return chunks


def brainos_sizes() -> list:
    """Chunk sizes (seconds) at which the ensemble is probed for the
    chunk-scale biomarker family. All are multiples of the default
    stride so coverage is gap-free."""
    return [2, 8, 14, 20]
