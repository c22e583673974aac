import math

import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from fskws.audio import (DspConfig, UnreadableAudioError, UnsupportedChannelsError,
                         UnsupportedEncodingError, UnsupportedSampleRateError, Waveform,
                         featurize, log_mel, mel_center_frequencies, mfcc, read_wav, write_wav)


def test_read_pcm16_scaling(tmp_path):
    path = tmp_path / "a.wav"
    wavfile.write(path, 16000, np.array([0, 16384, -32768], dtype=np.int16))
    w = read_wav(path)
    np.testing.assert_allclose(w.samples, [0.0, 0.5, -1.0])
    assert w.sample_rate == 16000


def test_read_float32(tmp_path):
    path = tmp_path / "f.wav"
    wavfile.write(path, 16000, np.array([0.25, -0.5], dtype=np.float32))
    np.testing.assert_allclose(read_wav(path).samples, [0.25, -0.5])


def test_read_frame_count(tmp_path):
    path = tmp_path / "long.wav"
    wavfile.write(path, 16000, np.zeros(16000, dtype=np.int16))
    w = read_wav(path)
    assert len(w) == 16000 and w.sample_rate == 16000


def test_read_errors_are_distinct(tmp_path):
    stereo = tmp_path / "stereo.wav"
    wavfile.write(stereo, 16000, np.zeros((10, 2), dtype=np.int16))
    with pytest.raises(UnsupportedChannelsError, match="unsupported channel count"):
        read_wav(stereo)
    rate = tmp_path / "rate.wav"
    wavfile.write(rate, 8000, np.zeros(10, dtype=np.int16))
    with pytest.raises(UnsupportedSampleRateError):
        read_wav(rate)
    enc = tmp_path / "int32.wav"
    wavfile.write(enc, 16000, np.zeros(10, dtype=np.int32))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(enc)
    garbage = tmp_path / "garbage.wav"
    garbage.write_bytes(b"not a wav")
    with pytest.raises(UnreadableAudioError):
        read_wav(garbage)
    with pytest.raises(UnreadableAudioError):
        read_wav(tmp_path / "missing.wav")


def test_write_roundtrip_sine(tmp_path):
    t = np.arange(16000) / 16000
    w = Waveform(0.5 * np.sin(2 * np.pi * 1000 * t))
    write_wav(tmp_path / "s.wav", w)
    back = read_wav(tmp_path / "s.wav")
    assert np.max(np.abs(back.samples - w.samples)) <= 2 ** -15


def test_write_empty_rejected(tmp_path):
    with pytest.raises(ValueError, match="empty waveform"):
        write_wav(tmp_path / "e.wav", Waveform(np.zeros(0)))


def test_write_clips_and_counts(tmp_path):
    n = write_wav(tmp_path / "c.wav", Waveform(np.array([1.5, -2.0, 0.1])))
    assert n == 2
    np.testing.assert_allclose(read_wav(tmp_path / "c.wav").samples[:2], [32767 / 32768, -1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4000), st.integers(0, 2**32 - 1))
def test_write_roundtrip_random(tmp_path_factory, n, seed):
    x = np.random.default_rng(seed).uniform(-0.9, 0.9, n)
    path = tmp_path_factory.mktemp("rt") / "r.wav"
    write_wav(path, Waveform(x))
    back = read_wav(path).samples
    assert len(back) == n
    assert np.max(np.abs(back - x)) <= 2 ** -15


def test_waveform_rejects_nan():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_frame_count_one_second():
    m = mfcc(Waveform(np.random.default_rng(0).uniform(-1, 1, 16000)), DspConfig())
    assert m.frames.shape == (98, 40)


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="shorter than one frame"):
        mfcc(Waveform(np.zeros(100)), DspConfig())


def test_zero_waveform_constant_frames():
    cfg = DspConfig()
    m = mfcc(Waveform(np.zeros(16000)), cfg).frames
    assert np.all(m == m[0])
    expected_c0 = math.sqrt(cfg.n_mels) * math.log(cfg.log_floor)
    assert m[0, 0] == pytest.approx(expected_c0, rel=1e-12)
    np.testing.assert_allclose(m[0, 1:], 0.0, atol=1e-9)


def reference_mfcc(x, cfg):
    """Loop-based straight-line pipeline with an explicit DFT and DCT."""
    sr = cfg.sample_rate
    flen, hop, nfft = cfg.frame_len, cfg.hop, cfg.fft_size
    emph = [x[0]] + [x[i] - cfg.preemphasis * x[i - 1] for i in range(1, len(x))]
    window = [0.5 - 0.5 * math.cos(2 * math.pi * n / flen) for n in range(flen)]
    n_bins = nfft // 2 + 1
    k = np.arange(n_bins)[:, None]
    n = np.arange(flen)[None, :]
    cos_m = np.cos(2 * np.pi * k * n / nfft)
    sin_m = np.sin(2 * np.pi * k * n / nfft)

    def mel(f):
        return 2595 * math.log10(1 + f / 700)

    def imel(m):
        return 700 * (10 ** (m / 2595) - 1)

    lo_m, hi_m = mel(cfg.mel_fmin_hz), mel(cfg.mel_fmax_hz)
    pts = [imel(lo_m + (hi_m - lo_m) * i / (cfg.n_mels + 1)) for i in range(cfg.n_mels + 2)]
    freqs = [b * sr / nfft for b in range(n_bins)]
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        a, b, c = pts[m], pts[m + 1], pts[m + 2]
        for j, f in enumerate(freqs):
            if a < f <= b:
                fb[m, j] = (f - a) / (b - a)
            elif b < f < c:
                fb[m, j] = (c - f) / (c - b)

    out = []
    n_frames = 1 + (len(x) - flen) // hop
    M = cfg.n_mels
    for t in range(n_frames):
        frame = np.array([emph[t * hop + i] * window[i] for i in range(flen)])
        mag = np.sqrt((cos_m @ frame) ** 2 + (sin_m @ frame) ** 2)
        logmel = [math.log(max(float(fb[m] @ mag), cfg.log_floor)) for m in range(M)]
        coeffs = []
        for q in range(cfg.n_mfcc):
            s = sum(logmel[m] * math.cos(math.pi * q * (2 * m + 1) / (2 * M)) for m in range(M))
            coeffs.append(s * (math.sqrt(1 / M) if q == 0 else math.sqrt(2 / M)))
        out.append(coeffs)
    return np.array(out)


def test_tone_at_band_center_matches_reference():
    cfg = DspConfig()
    band = 20
    f = mel_center_frequencies(cfg)[band]
    t = np.arange(4000) / 16000
    w = Waveform(0.5 * np.sin(2 * np.pi * f * t))
    lm = log_mel(w, cfg)
    assert np.all(np.argmax(lm[1:-1], axis=1) == band)
    np.testing.assert_allclose(mfcc(w, cfg).frames, reference_mfcc(w.samples, cfg), atol=1e-6)


def test_random_signal_matches_reference():
    cfg = DspConfig()
    x = np.random.default_rng(3).uniform(-0.5, 0.5, 1600)
    np.testing.assert_allclose(mfcc(Waveform(x), cfg).frames, reference_mfcc(x, cfg), atol=1e-6)


def test_framing_prefix_property():
    cfg = DspConfig()
    rng = np.random.default_rng(5)
    w1 = rng.uniform(-1, 1, 50 * cfg.hop)
    w2 = rng.uniform(-1, 1, 3000)
    a = mfcc(Waveform(w1), cfg).frames
    b = mfcc(Waveform(np.concatenate([w1, w2])), cfg).frames
    np.testing.assert_array_equal(b[: len(a)], a)


def test_determinism():
    x = Waveform(np.random.default_rng(1).uniform(-1, 1, 8000))
    np.testing.assert_array_equal(mfcc(x).frames, mfcc(x).frames)


def test_dct_truncation_idempotent():
    v = np.random.default_rng(2).standard_normal(64)
    c = scipy.fft.dct(v, type=2, norm="ortho")
    c[40:] = 0
    again = scipy.fft.dct(scipy.fft.idct(c, type=2, norm="ortho"), type=2, norm="ortho")
    np.testing.assert_allclose(again, c, atol=1e-9)


def test_config_invariants():
    with pytest.raises(ValueError):
        DspConfig(n_mfcc=80, n_mels=64)
    with pytest.raises(ValueError):
        DspConfig(log_floor=0.0)
    assert DspConfig().digest() == DspConfig().digest()
    assert DspConfig().digest() != DspConfig(n_mels=40).digest()


def test_featurize_fixed_length():
    cfg = DspConfig(clip_s=1.0)
    short = featurize(Waveform(np.ones(5000) * 0.1), cfg)
    long = featurize(Waveform(np.ones(30000) * 0.1), cfg)
    assert short.shape == long.shape == (98, 40)
    assert short.dtype == np.float32


def test_cepstral_mean_norm_flag():
    x = Waveform(np.random.default_rng(0).uniform(-1, 1, 8000))
    m = mfcc(x, DspConfig(cepstral_mean_norm=True)).frames
    np.testing.assert_allclose(m.mean(axis=0), 0.0, atol=1e-9)
