"""Feature extraction vs independent brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ovbm.audio_io import AudioClip, SynthSpec, synth_clip
from ovbm.mfcc import (
    CEP_LIFTER,
    MfccParams,
    OracleTooLarge,
    RateMismatch,
    TooManyFilters,
    dct2_matrix,
    fft_radix2,
    frame_signal,
    hz_to_mel,
    lifter_weights,
    load_mfcc,
    mel_filterbank,
    mel_to_hz,
    mfcc,
    mfcc_oracle,
    power_spectrum,
    preemphasize,
    save_mfcc,
)

FAST = MfccParams(num_cepstra=8, num_filters=16, fft_size=512)


def _clip(duration=0.3, seed=4, freq=700.0):
    return synth_clip(SynthSpec("t", duration,
                                [("sine", freq, 0.6), ("noise", 0.0, 0.2)],
                                seed=seed))


class TestMelScale:
    def test_known_point(self):
        assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
        assert hz_to_mel(0.0) == 0.0

    @given(st.floats(0.0, 8000.0))
    def test_round_trip(self, hz):
        assert mel_to_hz(hz_to_mel(hz)) == pytest.approx(hz, abs=1e-6)

    @given(st.floats(0.0, 7999.0), st.floats(0.001, 1.0))
    def test_monotone(self, hz, step):
        assert hz_to_mel(hz + step) > hz_to_mel(hz)


class TestFilterbank:
    def test_shape_and_support(self):
        fb = mel_filterbank(FAST)
        assert fb.weights.shape == (16, 512 // 2 + 1)
        assert np.all(fb.weights >= 0.0)
        assert np.all(fb.weights.sum(axis=1) > 0.0)

    def test_bin_points_formula(self):
        fb = mel_filterbank(FAST)
        low, high = hz_to_mel(0.0), hz_to_mel(8000.0)
        mels = np.linspace(low, high, 16 + 2)
        expected = np.floor((512 + 1) * mel_to_hz(mels) / 16000).astype(int)
        np.testing.assert_array_equal(fb.bin_points, expected)

    def test_too_many_filters(self):
        with pytest.raises(TooManyFilters):
            mel_filterbank(MfccParams(num_cepstra=8, num_filters=300,
                                      fft_size=512))


class TestFraming:
    def test_preemphasis_matches_loop(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=200)
        y = preemphasize(x, 0.97)
        expected = x.copy()
        for n in range(199, 0, -1):
            expected[n] = x[n] - 0.97 * x[n - 1]
        np.testing.assert_allclose(y, expected)
        assert y[0] == x[0]

    @given(st.integers(320, 20000))
    def test_frame_count_formula(self, n):
        clip = AudioClip(np.zeros(n), 16000)
        frames = frame_signal(clip, MfccParams())
        L, S = 320, 160
        assert frames.shape == (1 + -(-(n - L) // S), L)

    def test_tail_zero_padded(self):
        x = np.ones(400)  # frame 1 covers 160..480, needs 80 pad samples
        frames = frame_signal(AudioClip(x, 16000), MfccParams())
        assert frames.shape[0] == 2
        y = preemphasize(x, 0.97)
        np.testing.assert_array_equal(frames[1][:240], y[160:400])
        np.testing.assert_array_equal(frames[1][240:], np.zeros(80))

    def test_frames_match_manual_slices(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=1000)
        frames = frame_signal(AudioClip(x, 16000), MfccParams())
        y = preemphasize(x, 0.97)
        padded = np.concatenate([y, np.zeros(5 * 160 + 320 - 1000)])
        for i in range(frames.shape[0]):
            np.testing.assert_array_equal(frames[i],
                                          padded[i * 160:i * 160 + 320])


def _naive_dft(x):
    n = x.size
    k = np.arange(n)
    M = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return M @ x


class TestFft:
    @pytest.mark.parametrize("n", [2, 8, 64, 256])
    def test_matches_naive_dft(self, n):
        rng = np.random.default_rng(n)
        x = rng.normal(size=n)
        got = fft_radix2(x.astype(complex)[None, :])[0]
        want = _naive_dft(x)
        assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-10

    def test_rejects_non_power_of_two(self):
        with pytest.raises(ValueError):
            fft_radix2(np.zeros((1, 12), dtype=complex))

    def test_power_spectrum_scaling(self):
        x = np.zeros((1, 8))
        x[0, 0] = 1.0  # impulse: |FFT|^2 == 1 everywhere, /8
        ps = power_spectrum(x, 8)
        np.testing.assert_allclose(ps, np.full((1, 5), 1.0 / 8.0))


class TestDctLifter:
    def test_dct_orthonormal(self):
        D = dct2_matrix(16)
        np.testing.assert_allclose(D @ D.T, np.eye(16), atol=1e-12)

    def test_dct_row_formula(self):
        D = dct2_matrix(5)
        n = np.arange(5)
        row2 = np.sqrt(2.0 / 5.0) * np.cos(np.pi * 2 * (2 * n + 1) / (2 * 5))
        np.testing.assert_allclose(D[2], row2)
        np.testing.assert_allclose(D[0], np.full(5, np.sqrt(1.0 / 5.0)))

    def test_lifter_formula(self):
        w = lifter_weights(8)
        n = np.arange(8)
        np.testing.assert_allclose(
            w, 1.0 + (CEP_LIFTER / 2.0) * np.sin(np.pi * n / CEP_LIFTER))
        assert w[0] == 1.0


class TestMfccAgainstOracle:
    def test_matches_oracle(self):
        clip = _clip(0.3)
        fast = mfcc(clip, FAST).values
        slow = mfcc_oracle(clip, FAST).values
        rel = np.linalg.norm(fast - slow) / np.linalg.norm(slow)
        assert rel < 1e-6

    def test_reference_params_match_oracle(self):
        clip = _clip(0.2, seed=8)
        fast = mfcc(clip).values
        slow = mfcc_oracle(clip).values
        assert fast.shape[1] == 200
        rel = np.linalg.norm(fast - slow) / np.linalg.norm(slow)
        assert rel < 1e-6

    def test_oracle_refuses_long_clips(self):
        with pytest.raises(OracleTooLarge):
            mfcc_oracle(AudioClip(np.zeros(16000 * 3), 16000), FAST)

    def test_oracle_rate_mismatch(self):
        with pytest.raises(RateMismatch):
            mfcc_oracle(AudioClip(np.zeros(8000), 8000), FAST)


class TestMfccProperties:
    def test_c0_is_log_total_energy(self):
        # frame 0's energy recomputed with a naive DFT, no shared code path
        params = MfccParams(num_cepstra=8, num_filters=16, fft_size=512)
        clip = _clip(0.1)
        image = mfcc(clip, params).values
        y = preemphasize(clip.samples, params.preemphasis)
        frame0 = np.zeros(512, dtype=complex)
        frame0[:320] = y[:320]
        half = np.abs(_naive_dft(frame0))[:257] ** 2 / 512.0
        assert image[0, 0] == pytest.approx(np.log(half.sum()), rel=1e-9)

    def test_scaling_moves_only_c0(self):
        clip = _clip(0.15, seed=13)
        a = mfcc(clip, FAST).values
        b = mfcc(AudioClip(clip.samples * 2.0, clip.sample_rate), FAST).values
        np.testing.assert_allclose(a[:, 1:], b[:, 1:], atol=1e-8)
        assert np.all(b[:, 0] > a[:, 0])

    def test_deterministic(self):
        clip = _clip(0.1)
        np.testing.assert_array_equal(mfcc(clip, FAST).values,
                                      mfcc(clip, FAST).values)

    def test_num_cepstra_le_filters_enforced(self):
        with pytest.raises(ValueError):
            mfcc(_clip(0.05),
                 MfccParams(num_cepstra=20, num_filters=10, fft_size=512))


class TestMfccCache:
    def test_round_trip_exact(self, tmp_path):
        image = mfcc(_clip(0.1), FAST)
        path = tmp_path / "f.mfcc"
        save_mfcc(path, image)
        out = load_mfcc(path)
        np.testing.assert_array_equal(
            out, image.values.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "f.mfcc"
        save_mfcc(path, mfcc(_clip(0.05), FAST))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            load_mfcc(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "f.mfcc"
        save_mfcc(path, mfcc(_clip(0.05), FAST))
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError):
            load_mfcc(path)
