"""Waveform container, WAV I/O and the MFCC front-end."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft
from scipy.io import wavfile
from scipy.signal import get_window

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000


class AudioError(Exception):
    """Base class for audio container problems."""


class UnreadableAudioError(AudioError):
    pass


class UnsupportedChannelsError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class UnsupportedSampleRateError(AudioError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D samples)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a 16 kHz mono PCM16 or float32 WAV file, scaled to [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise UnreadableAudioError(f"unreadable file: {path}") from exc
    except (ValueError, OSError) as exc:
        raise UnreadableAudioError(f"unreadable file: {path} ({exc})") from exc
    if data.ndim != 1:
        raise UnsupportedChannelsError(
            f"unsupported channel count: {data.shape[1]} in {path}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(f"unsupported encoding {data.dtype} in {path}")
    if rate != SAMPLE_RATE:
        raise UnsupportedSampleRateError(
            f"unsupported sample rate {rate} Hz in {path} (need {SAMPLE_RATE})")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> int:
    """Write ``w`` as PCM16. Returns the number of clipped samples."""
    if len(w) == 0:
        raise ValueError("empty waveform")
    x = w.samples
    n_clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if n_clipped:
        log.warning("write_wav: clipped %d samples to [-1, 1] in %s", n_clipped, path)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    try:
        wavfile.write(path, w.sample_rate, pcm)
    except OSError as exc:
        raise AudioError(f"unwritable path: {path} ({exc})") from exc
    return n_clipped


def fix_length(w: Waveform, n_samples: int) -> Waveform:
    """Zero-pad or truncate at the end to exactly ``n_samples``."""
    x = w.samples
    if len(x) >= n_samples:
        return Waveform(x[:n_samples], w.sample_rate)
    return Waveform(np.pad(x, (0, n_samples - len(x))), w.sample_rate)


@dataclass(frozen=True)
class DspConfig:
    n_mfcc: int = 40
    n_mels: int = 64
    fft_size: int = 512
    frame_len_s: float = 0.025
    frame_hop_s: float = 0.010
    mel_fmin_hz: float = 20.0
    mel_fmax_hz: float = 7600.0
    log_floor: float = 1e-10
    preemphasis: float = 0.97
    # clips are padded/truncated to this length before featurization; 0 disables
    clip_s: float = 1.0
    cepstral_mean_norm: bool = False
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not self.n_mfcc <= self.n_mels <= self.fft_size // 2 + 1:
            raise ValueError("need n_mfcc <= n_mels <= fft_size/2 + 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.frame_len > self.fft_size:
            raise ValueError("frame longer than fft_size")
        if not 0 <= self.mel_fmin_hz < self.mel_fmax_hz <= self.sample_rate / 2:
            raise ValueError("invalid mel frequency range")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_len_s * self.sample_rate))

    @property
    def hop(self) -> int:
        return int(round(self.frame_hop_s * self.sample_rate))

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_s * self.sample_rate))

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.frame_len) // self.hop

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MfccSequence:
    frames: np.ndarray
    frame_hop_s: float = 0.010
    frame_len_s: float = 0.025

    @property
    def n_coeffs(self):
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


_FB_CACHE: dict = {}


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, fft_size//2 + 1)."""
    key = (cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.mel_fmin_hz, cfg.mel_fmax_hz)
    if key in _FB_CACHE:
        return _FB_CACHE[key]
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin_hz), hz_to_mel(cfg.mel_fmax_hz),
                                  cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    _FB_CACHE[key] = fb
    return fb


def mel_center_frequencies(cfg: DspConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin_hz), hz_to_mel(cfg.mel_fmax_hz),
                                  cfg.n_mels + 2))
    return edges[1:-1]


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - frame_len) // hop
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def log_mel(w: Waveform, cfg: DspConfig) -> np.ndarray:
    """Log mel-band energies, shape (T, n_mels)."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    x = w.samples
    if len(x) < cfg.frame_len:
        raise ValueError(
            f"waveform shorter than one frame ({len(x)} < {cfg.frame_len} samples)")
    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - cfg.preemphasis * x[:-1]
    frames = frame_signal(emph, cfg.frame_len, cfg.hop)
    frames = frames * get_window("hann", cfg.frame_len, fftbins=True)
    mag = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))
    energy = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(energy, cfg.log_floor))


def mfcc(w: Waveform, cfg: DspConfig = DspConfig()) -> MfccSequence:
    """MFCC features of a waveform (no length fixing; see :func:`featurize`)."""
    coeffs = scipy.fft.dct(log_mel(w, cfg), type=2, norm="ortho", axis=1)[:, :cfg.n_mfcc]
    if cfg.cepstral_mean_norm:
        coeffs = coeffs - coeffs.mean(axis=0, keepdims=True)
    return MfccSequence(coeffs, cfg.frame_hop_s, cfg.frame_len_s)


def featurize(w: Waveform, cfg: DspConfig = DspConfig(), dtype=np.float32) -> np.ndarray:
    """Fixed-length encoder input: pad/truncate to ``clip_s`` then MFCC."""
    if cfg.clip_s > 0:
        w = fix_length(w, cfg.clip_samples)
    return mfcc(w, cfg).frames.astype(dtype)
