"""Volume scaling, reverberation and noise injection for generated speech."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.signal import fftconvolve

from .audio import SAMPLE_RATE, Waveform, read_wav

log = logging.getLogger(__name__)

T60_TO_ENVELOPE = 3.0 * np.log(10.0)  # exp(-6.9077 t / t60) is -60 dB at t60


class RirProvider(Protocol):
    def next(self, rng: np.random.Generator, length: int) -> Waveform: ...


class NoiseProvider(Protocol):
    def next(self, rng: np.random.Generator, length: int) -> Waveform: ...


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def scale_volume(w: Waveform, target_max: float) -> Waveform:
    peak = np.max(np.abs(w.samples))
    if peak == 0:
        raise ValueError("cannot scale a silent (all-zero) waveform")
    if target_max <= 0:
        raise ValueError("target_max must be positive")
    return Waveform(w.samples * (target_max / peak), w.sample_rate)


def add_reverb(w: Waveform, rir: Waveform) -> Waveform:
    """Convolve with ``rir``, truncate to len(w), restore the original peak."""
    if w.sample_rate != rir.sample_rate:
        raise ValueError(
            f"sample-rate mismatch: signal {w.sample_rate} Hz, rir {rir.sample_rate} Hz")
    if len(w) == 0 or len(rir) == 0:
        raise ValueError("empty waveform")
    wet = fftconvolve(w.samples, rir.samples)[: len(w)]
    peak_in = np.max(np.abs(w.samples))
    peak_out = np.max(np.abs(wet))
    if peak_out > 0:
        wet = wet * (peak_in / peak_out)
    return Waveform(wet, w.sample_rate)


def synth_rir(rng: np.random.Generator, duration_s: float, decay_t60_s: float,
              sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Exponentially decaying white noise with a unit direct path."""
    if duration_s <= 0 or decay_t60_s <= 0:
        raise ValueError("duration_s and decay_t60_s must be positive")
    n = max(1, int(round(duration_s * sample_rate)))
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n)
    h *= np.exp(-T60_TO_ENVELOPE * t / decay_t60_s)
    if n > 1:
        h[1:] /= max(1.0, np.max(np.abs(h[1:])))
    h[0] = 1.0
    return Waveform(h, sample_rate)


def add_noise(w: Waveform, noise: Waveform, snr_db: float, clip: bool = True) -> Waveform:
    """Mix ``noise`` into ``w`` at ``snr_db``; noise is cropped to len(w)."""
    if len(noise) < len(w):
        raise ValueError("noise shorter than signal")
    n = noise.samples[: len(w)]
    s_rms, n_rms = rms(w.samples), rms(n)
    if s_rms == 0:
        raise ValueError("silent signal")
    if n_rms == 0:
        raise ValueError("silent noise")
    gain = (s_rms / n_rms) * 10.0 ** (-snr_db / 20.0)
    out = w.samples + gain * n
    if clip:
        out = np.clip(out, -1.0, 1.0)
    return Waveform(out, w.sample_rate)


def _tile_to(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) >= length:
        start = int(rng.integers(0, len(x) - length + 1))
        return x[start:start + length]
    reps = -(-length // len(x))
    return np.tile(x, reps)[:length]


@dataclass
class SyntheticRirProvider:
    t60_range: tuple = (0.1, 0.6)
    sample_rate: int = SAMPLE_RATE

    def next(self, rng, length=None):
        t60 = rng.uniform(*self.t60_range)
        return synth_rir(rng, t60, t60, self.sample_rate)


@dataclass
class SyntheticNoiseProvider:
    """White or pink noise with equal probability."""

    sample_rate: int = SAMPLE_RATE

    def next(self, rng, length):
        white = rng.standard_normal(length)
        if rng.random() < 0.5:
            return Waveform(white, self.sample_rate)
        spec = np.fft.rfft(white)
        f = np.arange(len(spec), dtype=np.float64)
        f[0] = 1.0
        pink = np.fft.irfft(spec / np.sqrt(f), n=length)
        return Waveform(pink / (np.std(pink) + 1e-12), self.sample_rate)


class DirectoryProvider:
    """Serves clips from a folder of 16 kHz mono WAVs (sorted filename order)."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"missing directory: {self.root}")
        self.paths = sorted(self.root.glob("*.wav"))
        if not self.paths:
            raise FileNotFoundError(f"no WAV files in {self.root}")
        self._cache: dict = {}

    def _load(self, i):
        if i not in self._cache:
            self._cache[i] = read_wav(self.paths[i])
        return self._cache[i]


class DirectoryRirProvider(DirectoryProvider):
    def next(self, rng, length=None):
        return self._load(int(rng.integers(len(self.paths))))


class DirectoryNoiseProvider(DirectoryProvider):
    def next(self, rng, length):
        w = self._load(int(rng.integers(len(self.paths))))
        return Waveform(_tile_to(w.samples, length, rng), w.sample_rate)


@dataclass
class AugmentConfig:
    vol_max_range: tuple = (0.2, 0.9)
    snr_db_range: tuple = (10.0, 20.0)
    apply_prob: float = 0.9
    enabled: bool = True
    rir_source: RirProvider = field(default_factory=SyntheticRirProvider)
    noise_source: NoiseProvider = field(default_factory=SyntheticNoiseProvider)

    def __post_init__(self):
        for name in ("vol_max_range", "snr_db_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
            setattr(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")


@dataclass
class AugmentStats:
    n: int = 0
    reverb: int = 0
    noise: int = 0
    clipped_samples: int = 0


def _draw(rng, bounds):
    lo, hi = bounds
    u = rng.random()
    return lo if lo == hi else lo + (hi - lo) * u


def augment(w: Waveform, cfg: AugmentConfig, rng: np.random.Generator,
            stats: AugmentStats | None = None) -> Waveform:
    """Volume scaling (always), then reverb and noise each with ``apply_prob``.

    All random draws are taken up front in a fixed order so the result is a
    pure function of (w, cfg, rng state).
    """
    if not cfg.enabled:
        return w
    target = _draw(rng, cfg.vol_max_range)
    do_reverb = rng.random() < cfg.apply_prob
    do_noise = rng.random() < cfg.apply_prob
    snr = _draw(rng, cfg.snr_db_range)

    out = scale_volume(w, target)
    if do_reverb:
        out = add_reverb(out, cfg.rir_source.next(rng, len(out)))
    if do_noise:
        noisy = add_noise(out, cfg.noise_source.next(rng, len(out)), snr, clip=False)
        clipped = int(np.count_nonzero(np.abs(noisy.samples) > 1.0))
        out = Waveform(np.clip(noisy.samples, -1.0, 1.0), w.sample_rate)
    else:
        clipped = 0
    if stats is not None:
        stats.n += 1
        stats.reverb += int(do_reverb)
        stats.noise += int(do_noise)
        stats.clipped_samples += clipped
    return out
