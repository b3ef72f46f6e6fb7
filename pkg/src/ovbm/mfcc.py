"""MFCC feature images with a fixed, fully specified parameterization.

Pipeline: pre-emphasis -> rectangular framing -> radix-2 FFT power
spectrum (|X|^2 / fft_size) -> mel triangular filterbank -> log with a
floor -> orthonormal DCT-II -> sinusoidal liftering -> coefficient 0
replaced by the log total frame energy.

`mfcc_oracle` recomputes the whole chain with naive direct-DFT and
naive DCT sums (O(N^2)); it exists so the fast path can be checked
against an independent route and is limited to short clips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, EmptyAudio

CEP_LIFTER = 22  # sinusoidal lifter length applied to the cepstra

MFCC_MAGIC = b"MFCC"
MFCC_FORMAT_VERSION = 1


class RateMismatch(ValueError):
    """Clip sample rate disagrees with the MFCC parameterization."""


class TooManyFilters(ValueError):
    """Adjacent mel filter centers collide on the FFT bin grid."""


class OracleTooLarge(ValueError):
    """The O(N^2) oracle only accepts short clips."""


@dataclass
class MfccParams:
    """Feature extraction knobs. Defaults: 20 ms / 10 ms rectangular
    frames, 200 filters, 200 cepstra, 2048-point FFT at 16 kHz."""

    window_len: float = 0.020
    window_step: float = 0.010
    num_cepstra: int = 200
    num_filters: int = 200
    fft_size: int = 2048
    sample_rate: int = 16000
    preemphasis: float = 0.97
    low_freq: float = 0.0
    high_freq: float | None = None
    log_floor: float = 1e-10

    @property
    def frame_len(self) -> int:
        return int(round(self.window_len * self.sample_rate))

    @property
    def frame_step(self) -> int:
        return int(round(self.window_step * self.sample_rate))

    @property
    def resolved_high_freq(self) -> float:
        return self.sample_rate / 2.0 if self.high_freq is None else self.high_freq

    def validate(self) -> None:
        if self.window_len <= 0 or self.window_step <= 0:
            raise ValueError("window_len and window_step must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.num_filters < 1 or self.num_cepstra < 1:
            raise ValueError("need at least one filter and one cepstrum")
        if self.num_cepstra > self.num_filters:
            raise ValueError("num_cepstra must not exceed num_filters")
        if self.fft_size < self.frame_len:
            raise ValueError("fft_size must cover a whole frame")
        if self.fft_size & (self.fft_size - 1) or self.fft_size == 0:
            raise ValueError("fft_size must be a power of two")
        if not 0.0 <= self.preemphasis < 1.0:
            raise ValueError("preemphasis must be in [0, 1)")
        if not 0.0 <= self.low_freq < self.resolved_high_freq:
            raise ValueError("need 0 <= low_freq < high_freq")
        if self.resolved_high_freq > self.sample_rate / 2.0 + 1e-9:
            raise ValueError("high_freq above Nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    def to_dict(self) -> dict:
        return {
            "window_len": self.window_len,
            "window_step": self.window_step,
            "num_cepstra": self.num_cepstra,
            "num_filters": self.num_filters,
            "fft_size": self.fft_size,
            "sample_rate": self.sample_rate,
            "preemphasis": self.preemphasis,
            "low_freq": self.low_freq,
            "high_freq": self.high_freq,
            "log_floor": self.log_floor,
        }


@dataclass
class MfccImage:
    """values: [num_frames x num_cepstra] float64; source_span is the
    (start, end) seconds this image was cut from."""

    values: np.ndarray
    params: MfccParams
    source_span: tuple = (0.0, 0.0)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def num_coefficients(self) -> int:
        return self.values.shape[1]


@dataclass
class FilterBank:
    """weights: [num_filters x (fft_size//2 + 1)], triangular rows."""

    weights: np.ndarray
    bin_points: np.ndarray = field(default=None, repr=False)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: MfccParams) -> FilterBank:
    """Triangular filters with centers equally spaced on the mel axis.

    Centers are quantized to FFT bins; if two adjacent edge/center
    points land on the same bin the bank is over-resolved for this FFT
    size and we refuse rather than silently merging filters.
    """
    params.validate()
    nfft = params.fft_size
    mel_points = np.linspace(
        hz_to_mel(params.low_freq),
        hz_to_mel(params.resolved_high_freq),
        params.num_filters + 2,
    )
    hz_points = mel_to_hz(mel_points)
    bins = np.floor((nfft + 1) * hz_points / params.sample_rate).astype(np.int64)
    if np.any(np.diff(bins) == 0):
        raise TooManyFilters(
            f"{params.num_filters} filters collide on a {nfft}-point FFT grid"
        )
    weights = np.zeros((params.num_filters, nfft // 2 + 1), dtype=np.float64)
    for j in range(params.num_filters):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        for i in range(left, center):
            weights[j, i] = (i - left) / (center - left)
        for i in range(center, right):
            weights[j, i] = (right - i) / (right - center)
    return FilterBank(weights, bins)


def preemphasize(samples: np.ndarray, coeff: float) -> np.ndarray:
    """y[n] = x[n] - coeff * x[n-1], with y[0] = x[0]."""
    out = np.empty_like(samples)
    out[0] = samples[0]
    out[1:] = samples[1:] - coeff * samples[:-1]
    return out


def frame_signal(clip: AudioClip, params: MfccParams) -> np.ndarray:
    """Pre-emphasize then slice into overlapping rectangular frames.

    Frame count is 1 + ceil((N - L) / S); the tail frame is zero-padded.
    Signals shorter than one frame are zero-padded up to L first.
    """
    if clip.sample_rate != params.sample_rate:
        raise RateMismatch(
            f"clip at {clip.sample_rate} Hz, params expect {params.sample_rate} Hz"
        )
    if clip.samples.size == 0:
        raise EmptyAudio("cannot frame an empty clip")
    y = preemphasize(clip.samples, params.preemphasis)
    L, S = params.frame_len, params.frame_step
    if y.size < L:
        y = np.concatenate([y, np.zeros(L - y.size)])
    num_frames = 1 + -(-(y.size - L) // S)  # 1 + ceil((N - L) / S)
    padded_len = (num_frames - 1) * S + L
    if padded_len > y.size:
        y = np.concatenate([y, np.zeros(padded_len - y.size)])
    idx = np.arange(num_frames)[:, None] * S + np.arange(L)[None, :]
    return y[idx]


def _bit_reversal(n: int) -> np.ndarray:
    levels = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for _ in range(levels):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft_radix2(x: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time radix-2 FFT over the last axis.

    The last axis length must be a power of two. Vectorized over any
    leading axes so a whole frame matrix transforms in one call.
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ValueError("FFT length must be a power of two")
    prefix = x.shape[:-1]
    y = x[..., _bit_reversal(n)].astype(np.complex128)
    m = 1
    while m < n:
        twiddle = np.exp((-1j * np.pi / m) * np.arange(m))
        y = y.reshape(prefix + (n // (2 * m), 2, m))
        even = y[..., 0, :]
        odd = y[..., 1, :] * twiddle
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(prefix + (n,))
        m *= 2
    return y


def power_spectrum(frames: np.ndarray, fft_size: int) -> np.ndarray:
    """|FFT|^2 / fft_size over the one-sided spectrum (fft_size//2 + 1 bins)."""
    padded = np.zeros(frames.shape[:-1] + (fft_size,), dtype=np.float64)
    padded[..., : frames.shape[-1]] = frames
    spec = fft_radix2(padded)[..., : fft_size // 2 + 1]
    return (spec.real**2 + spec.imag**2) / fft_size


def filterbank_energies(clip: AudioClip, params: MfccParams):
    """Pre-DCT quantities: (filter energies [F x nfilt], total frame
    energy [F]). Exposed separately so tests can check them directly."""
    frames = frame_signal(clip, params)
    ps = power_spectrum(frames, params.fft_size)
    bank = mel_filterbank(params)
    energies = ps @ bank.weights.T
    total = ps.sum(axis=1)
    return energies, total


_DCT_CACHE: dict = {}


def dct2_matrix(size: int) -> np.ndarray:
    """Orthonormal DCT-II basis; row k dotted with a signal gives
    coefficient k."""
    if size not in _DCT_CACHE:
        j = np.arange(size, dtype=np.float64)
        k = np.arange(size, dtype=np.float64)[:, None]
        mat = np.cos(np.pi * k * (2.0 * j + 1.0) / (2.0 * size))
        mat[0] *= math.sqrt(1.0 / size)
        mat[1:] *= math.sqrt(2.0 / size)
        _DCT_CACHE[size] = mat
    return _DCT_CACHE[size]


def lifter_weights(num_cepstra: int) -> np.ndarray:
    n = np.arange(num_cepstra, dtype=np.float64)
    return 1.0 + (CEP_LIFTER / 2.0) * np.sin(np.pi * n / CEP_LIFTER)


def mfcc(clip: AudioClip, params: MfccParams | None = None,
         source_span: tuple | None = None) -> MfccImage:
    """Compute the MFCC image of a clip."""
    params = MfccParams() if params is None else params
    params.validate()
    energies, total = filterbank_energies(clip, params)
    log_energies = np.log(np.maximum(energies, params.log_floor))
    basis = dct2_matrix(params.num_filters)[: params.num_cepstra]
    feat = log_energies @ basis.T
    feat *= lifter_weights(params.num_cepstra)[None, :]
    feat[:, 0] = np.log(np.maximum(total, params.log_floor))
    span = (0.0, clip.duration) if source_span is None else tuple(source_span)
    return MfccImage(feat, params, span)


def mfcc_oracle(clip: AudioClip, params: MfccParams | None = None) -> MfccImage:
    """Slow reference path: direct DFT sums and naive DCT sums.

    Kept deliberately independent of the fast path: its own framing
    loop, explicit cos/sin DFT evaluation, per-filter summation, and a
    literal DCT-II formula. Refuses clips longer than two seconds.
    """
    params = MfccParams() if params is None else params
    params.validate()
    if clip.duration > 2.0 + 1e-9:
        raise OracleTooLarge(f"oracle limited to 2 s, got {clip.duration:.3f} s")
    if clip.samples.size == 0:
        raise EmptyAudio("cannot frame an empty clip")
    if clip.sample_rate != params.sample_rate:
        raise RateMismatch("oracle: sample rate mismatch")

    x = clip.samples
    y = np.empty_like(x)
    for i in range(x.size):
        y[i] = x[i] if i == 0 else x[i] - params.preemphasis * x[i - 1]

    L, S = params.frame_len, params.frame_step
    if y.size < L:
        y = np.concatenate([y, np.zeros(L - y.size)])
    num_frames = 1 + math.ceil((y.size - L) / S)
    frames = []
    for i in range(num_frames):
        seg = y[i * S: i * S + L]
        if seg.size < L:
            seg = np.concatenate([seg, np.zeros(L - seg.size)])
        frames.append(seg)

    nfft = params.fft_size
    nbins = nfft // 2 + 1
    angles = 2.0 * np.pi * np.outer(np.arange(nbins), np.arange(nfft)) / nfft
    cos_m, sin_m = np.cos(angles), np.sin(angles)
    bank = mel_filterbank(params)

    nfilt, ncep = params.num_filters, params.num_cepstra
    scale0, scale = math.sqrt(1.0 / nfilt), math.sqrt(2.0 / nfilt)
    feat = np.zeros((num_frames, ncep))
    for f, frame in enumerate(frames):
        padded = np.zeros(nfft)
        padded[:L] = frame
        re = cos_m @ padded
        im = -(sin_m @ padded)
        ps = (re * re + im * im) / nfft

        energies = np.zeros(nfilt)
        for j in range(nfilt):
            energies[j] = np.sum(bank.weights[j] * ps)
        loge = np.log(np.maximum(energies, params.log_floor))

        for k in range(ncep):
            c = np.sum(loge * np.cos(np.pi * k * (2.0 * np.arange(nfilt) + 1.0)
                                     / (2.0 * nfilt)))
            c *= scale0 if k == 0 else scale
            feat[f, k] = c * (1.0 + (CEP_LIFTER / 2.0)
                              * math.sin(math.pi * k / CEP_LIFTER))
        feat[f, 0] = math.log(max(ps.sum(), params.log_floor))
    return MfccImage(feat, params, (0.0, clip.duration))


def save_mfcc(path, image) -> None:
    """Feature cache format: magic, u32 version, u32 rows, u32 cols,
    float32 row-major little-endian values."""
    values = image.values if isinstance(image, MfccImage) else np.asarray(image)
    rows, cols = values.shape
    header = MFCC_MAGIC + np.array(
        [MFCC_FORMAT_VERSION, rows, cols], dtype="<u4"
    ).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + values.astype("<f4").tobytes())


def load_mfcc(path) -> np.ndarray:
    """Read a feature cache file back as float64 (stored as float32)."""
    from pathlib import Path

    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != MFCC_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    version, rows, cols = np.frombuffer(data[4:16], dtype="<u4")
    if version != MFCC_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != rows * cols:
        raise ValueError(f"{path}: payload size mismatch")
    return body.reshape(rows, cols).astype(np.float64)
