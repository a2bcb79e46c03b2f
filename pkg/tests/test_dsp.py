"""Tests for the time-frequency front-end.

Derived expectations are checked against independent oracles written here:
a naive direct-DFT of one frame, a loop-built mel filterbank, and a
measured resampling SNR.
"""

import numpy as np
import pytest

from querysep import dsp
from querysep.dsp import (
    ComplexSpectrogram,
    MelConfig,
    StftConfig,
    Waveform,
    apply_mask,
    istft,
    magphase,
    masked_magphase,
    mel_spectrogram,
    recompose,
    resample,
    stft,
)

TOY = StftConfig(window_length=256, hop=80, n_fft=256)
PAPER = StftConfig(window_length=1024, hop=320, n_fft=1024)


def naive_frame_dft(samples: np.ndarray, cfg: StftConfig, frame: int) -> np.ndarray:
    """Oracle: one centered STFT frame computed by direct summation."""
    pad = cfg.n_fft // 2
    padded = np.pad(samples, pad, mode="reflect")
    start = frame * cfg.hop
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.window_length) / cfg.window_length)
    seg = padded[start : start + cfg.window_length] * window
    k = np.arange(cfg.n_fft // 2 + 1)
    n = np.arange(cfg.window_length)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / cfg.n_fft)
    return basis @ seg


def naive_mel_matrix(rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Oracle: mel filterbank built bin by bin with scalar arithmetic."""
    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def inv(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = [inv(mel(rate / 2) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    out = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        for b in range(n_fft // 2 + 1):
            f = b * rate / n_fft
            if lo < f < hi:
                w = (f - lo) / (mid - lo) if f <= mid else (hi - f) / (hi - mid)
                out[i, b] = w * 2.0 / (hi - lo)
    return out


def rand_wave(n, rate, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return Waveform(scale * rng.standard_normal(n), rate)


class TestStft:
    def test_zero_waveform_gives_zero_spectrogram(self):
        s = stft(Waveform(np.zeros(8000), 8000), TOY)
        assert np.all(s.values == 0)

    def test_paper_geometry_10s_32k(self):
        s = stft(rand_wave(320000, 32000), PAPER)
        assert s.frames == 1001
        assert s.bins == 513

    def test_toy_geometry_1s_8k(self):
        s = stft(rand_wave(8000, 8000), TOY)
        assert s.frames == 101
        assert s.bins == 129

    def test_frame_matches_direct_dft_oracle(self):
        w = rand_wave(8000, 8000, seed=3)
        s = stft(w, TOY)
        for frame in (0, 7, 50, 100):
            expect = naive_frame_dft(w.samples, TOY, frame)
            np.testing.assert_allclose(s.values[frame], expect, rtol=1e-9, atol=1e-12)

    def test_bin_centered_cosine_concentrates(self):
        # Hann mainlobe spans k-1..k+1, so "concentrated in bin k" is
        # checked as argmax at k plus >99% of energy within one bin of k.
        rate, k = 8000, 24
        f = k * rate / TOY.n_fft
        t = np.arange(8000) / rate
        s = stft(Waveform(0.5 * np.cos(2 * np.pi * f * t), rate), TOY)
        for frame in range(10, 90):
            energy = np.abs(s.values[frame]) ** 2
            assert np.argmax(energy) == k
            assert energy[k - 1 : k + 2].sum() > 0.99 * energy.sum()

    def test_empty_waveform_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            stft(Waveform(np.zeros(0), 8000), TOY)

    def test_nan_waveform_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            Waveform(np.array([0.0, np.nan]), 8000)

    def test_too_short_for_padding_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            stft(Waveform(np.zeros(128), 8000), TOY)

    def test_linearity(self):
        w1, w2 = rand_wave(8000, 8000, 1), rand_wave(8000, 8000, 2)
        lhs = stft(Waveform(0.7 * w1.samples - 1.3 * w2.samples, 8000), TOY).values
        rhs = 0.7 * stft(w1, TOY).values - 1.3 * stft(w2, TOY).values
        np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-15)


class TestIstft:
    @pytest.mark.parametrize("cfg,n,rate", [(TOY, 8000, 8000), (PAPER, 320000, 32000)])
    def test_round_trip(self, cfg, n, rate):
        w = rand_wave(n, rate, seed=11)
        out = istft(stft(w, cfg))
        assert out.samples.size == n
        assert np.max(np.abs(out.samples - w.samples)) < 1e-6

    def test_zero_spectrogram_gives_zero_waveform(self):
        s = stft(rand_wave(8000, 8000), TOY)
        zero = ComplexSpectrogram(np.zeros_like(s.values), TOY, s.source_length, 8000)
        out = istft(zero)
        assert out.samples.size == 8000
        assert np.all(out.samples == 0)

    def test_scaling_linearity(self):
        w = rand_wave(8000, 8000, 5)
        s = stft(w, TOY)
        doubled = ComplexSpectrogram(2 * s.values, TOY, s.source_length, 8000)
        np.testing.assert_allclose(istft(doubled).samples, 2 * istft(s).samples, atol=1e-12)

    def test_bin_mismatch_rejected(self):
        s = stft(rand_wave(8000, 8000), TOY)
        with pytest.raises(ValueError, match="bin count"):
            ComplexSpectrogram(s.values[:, :-1], TOY, s.source_length, 8000)


class TestMagPhase:
    def test_polar_identity(self):
        s = ComplexSpectrogram(np.array([[3 + 4j, 0j]]), StftConfig(2, 1, 2), 2, 8000)
        mp = magphase(s)
        assert mp.magnitude[0, 0] == pytest.approx(5.0)
        assert mp.phase[0, 0] == pytest.approx(np.arctan2(4, 3))

    def test_zero_gets_phase_zero(self):
        s = ComplexSpectrogram(np.array([[0j, 1j]]), StftConfig(2, 1, 2), 2, 8000)
        mp = magphase(s)
        assert mp.magnitude[0, 0] == 0.0
        assert mp.phase[0, 0] == 0.0

    def test_recomposition_error_below_1e12(self):
        s = stft(rand_wave(8000, 8000, 7), TOY)
        back = recompose(magphase(s))
        assert np.max(np.abs(back.values - s.values)) < 1e-12


class TestApplyMask:
    def setup_method(self):
        self.spec = stft(rand_wave(8000, 8000, 9), TOY)
        self.mp = magphase(self.spec)

    def test_all_ones_identity(self):
        out = apply_mask(np.ones_like(self.mp.magnitude), self.mp)
        np.testing.assert_allclose(out.values, self.spec.values, atol=1e-12)

    def test_all_zeros(self):
        out = apply_mask(np.zeros_like(self.mp.magnitude), self.mp)
        assert np.all(out.values == 0)

    def test_half_mask_halves_magnitude_keeps_phase(self):
        mp2 = MagPhase_like(self.mp, magnitude=np.full_like(self.mp.magnitude, 2.0))
        out = masked_magphase(np.full_like(self.mp.magnitude, 0.5), mp2)
        assert np.all(out.magnitude == 1.0)
        assert out.phase is mp2.phase

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mask shape"):
            apply_mask(np.ones((3, 3)), self.mp)

    def test_mask_identity_round_trip(self):
        w = rand_wave(8000, 8000, 13)
        out = istft(apply_mask(np.ones((101, 129)), magphase(stft(w, TOY))))
        assert np.max(np.abs(out.samples - w.samples)) < 1e-6

    def test_mask_below_one_never_grows_magnitude(self):
        rng = np.random.default_rng(21)
        mask = rng.uniform(0, 1, self.mp.magnitude.shape)
        out = masked_magphase(mask, self.mp)
        assert np.all(out.magnitude <= self.mp.magnitude + 1e-15)


def MagPhase_like(mp, magnitude):
    return dsp.MagPhase(magnitude, mp.phase, mp.config, mp.source_length, mp.sample_rate)


class TestMel:
    CFG = MelConfig(target_rate=8000, window_length=256, hop=80, n_mels=64)

    def test_zero_input_zero_mel(self):
        m = mel_spectrogram(Waveform(np.zeros(8000), 8000), self.CFG)
        assert np.all(m.values == 0)

    def test_paper_defaults_give_64_bins(self):
        cfg = MelConfig(target_rate=48000, window_length=1024, hop=480, n_mels=64)
        m = mel_spectrogram(rand_wave(32000, 32000), cfg)
        assert m.mel_bins == 64

    def test_white_noise_energizes_every_band(self):
        m = mel_spectrogram(rand_wave(8000, 8000, 17), self.CFG)
        assert np.all(m.values.sum(axis=0) > 0)

    def test_matches_filterbank_oracle(self):
        w = rand_wave(8000, 8000, 19)
        m = mel_spectrogram(w, self.CFG)
        power = np.abs(stft(w, TOY).values) ** 2
        expect = power @ naive_mel_matrix(8000, 256, 64).T
        np.testing.assert_allclose(m.values, expect, rtol=1e-9, atol=1e-15)

    def test_every_paper_profile_filter_is_nonempty(self):
        fb = dsp.mel_filterbank(48000, 1024, 64)
        assert np.all(fb.sum(axis=1) > 0)

    def test_short_waveform_rejected(self):
        with pytest.raises(ValueError, match="shorter than one"):
            mel_spectrogram(Waveform(np.zeros(200), 8000), self.CFG)

    def test_frame_count_matches_linear_profile(self):
        m = mel_spectrogram(rand_wave(8000, 8000), self.CFG)
        assert m.frames == 101


class TestResample:
    def test_same_rate_identity(self):
        w = rand_wave(8000, 8000)
        out = resample(w, 8000)
        assert np.array_equal(out.samples, w.samples)

    def test_32k_to_48k_length(self):
        out = resample(rand_wave(32000, 32000), 48000)
        assert out.samples.size == 48000
        assert out.sample_rate == 48000

    def test_sine_round_trip_snr_above_40db(self):
        rate = 32000
        t = np.arange(rate) / rate
        x = np.sin(2 * np.pi * 1000 * t)
        back = resample(resample(Waveform(x, rate), 48000), rate)
        err = back.samples[:rate] - x
        snr = 10 * np.log10(np.sum(x**2) / np.sum(err**2))
        assert snr > 40

    def test_bad_rate_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            resample(rand_wave(100, 8000), 0)


class TestWavIo:
    def test_float_round_trip(self, tmp_path):
        w = rand_wave(8000, 8000, 23, scale=0.3)
        path = tmp_path / "x.wav"
        dsp.write_wav(path, w)
        back = dsp.read_wav(path)
        assert back.sample_rate == 8000
        np.testing.assert_allclose(back.samples, w.samples, atol=1e-6)

    def test_pcm16_read(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "p.wav"
        wavfile.write(path, 8000, (np.ones(100) * 16384).astype(np.int16))
        back = dsp.read_wav(path)
        assert back.samples[0] == pytest.approx(0.5)

    def test_stereo_averaged_to_mono(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "s.wav"
        data = np.stack([np.ones(100), np.zeros(100)], axis=1).astype(np.float32)
        wavfile.write(path, 8000, data)
        back = dsp.read_wav(path)
        assert back.samples.ndim == 1
        assert back.samples[0] == pytest.approx(0.5)


class TestConfigValidation:
    def test_hop_above_half_window_rejected(self):
        with pytest.raises(ValueError, match="COLA"):
            StftConfig(window_length=256, hop=200, n_fft=256)

    def test_window_above_nfft_rejected(self):
        with pytest.raises(ValueError, match="hop <= window_length <= n_fft"):
            StftConfig(window_length=512, hop=128, n_fft=256)
