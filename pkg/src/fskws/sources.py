"""Multi-view keyword sources: the parametric oracle synthesizer and on-disk datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .audio import SAMPLE_RATE, Waveform, read_wav


@dataclass(frozen=True)
class KeywordClass:
    class_id: str
    spec: object  # tuple of unit ids (oracle) or keyword string (datasets)


class SampleSource(Protocol):
    def new_class(self, rng: np.random.Generator) -> KeywordClass: ...

    def render(self, cls: KeywordClass, rng: np.random.Generator) -> Waveform: ...


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# Parametric oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleGenConfig:
    n_units: int = 64
    l_min: int = 10
    l_max: int = 20
    unit_duration_range: tuple = (0.04, 0.12)
    pitch_range_hz: tuple = (90.0, 300.0)
    formant_jitter: float = 0.10
    tempo_range: tuple = (0.85, 1.15)
    crossfade_s: float = 0.005
    peak: float = 0.8
    max_harmonic_hz: float = 4000.0
    formant_bandwidth_hz: float = 60.0
    aspiration: float = 10.0  # noise-to-harmonic power ratio per unit
    spectral_floor: float = 1e-4
    template_seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_units < 1:
            raise ValueError("n_units must be positive")
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError("need 1 <= l_min <= l_max")
        for name in ("unit_duration_range", "pitch_range_hz", "tempo_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0 <= self.formant_jitter < 1:
            raise ValueError("formant_jitter must lie in [0, 1)")
        if self.formant_bandwidth_hz <= 0 or self.aspiration < 0 or self.spectral_floor < 0:
            raise ValueError("formant_bandwidth_hz must be positive; aspiration, spectral_floor non-negative")
        if self.crossfade_s < 0:
            raise ValueError("crossfade_s must be non-negative")
        if 2 * self.crossfade_s >= self.unit_duration_range[0] / self.tempo_range[1]:
            raise ValueError("cross-fade too long for the shortest unit")

    @property
    def crossfade(self) -> int:
        return int(round(self.crossfade_s * self.sample_rate))


@dataclass(frozen=True)
class UnitTable:
    f1: np.ndarray
    f2: np.ndarray
    duration_s: np.ndarray
    gain: np.ndarray

    @classmethod
    def build(cls, cfg: OracleGenConfig) -> "UnitTable":
        rng = np.random.default_rng([cfg.template_seed, cfg.n_units])
        n = cfg.n_units
        return cls(
            f1=rng.uniform(250.0, 850.0, n),
            f2=rng.uniform(900.0, 2600.0, n),
            duration_s=rng.uniform(*cfg.unit_duration_range, n),
            gain=rng.uniform(0.5, 1.0, n),
        )


@dataclass(frozen=True)
class ViewParams:
    """Per-view "speaker" and prosody draw."""
    pitch_hz: float
    tempo: float
    jitter: np.ndarray | None = None  # (L, 2) factors on (F1, F2) per unit; None = no jitter


def _resonance(f, center, bandwidth):
    # Lorentzian with full width ``bandwidth`` at half maximum
    return 1.0 / (1.0 + (2.0 * (f - center) / bandwidth) ** 2)


class OracleSource:
    """Unit-sequence synthesizer standing in for a pseudo-phoneme TTS.

    A class is a sequence of unit ids; each unit has a fixed two-resonance
    spectral template, base duration and gain. A view draws pitch, tempo and a
    formant scaling per unit, and renders each unit as a harmonic series plus
    formant-shaped aspiration noise, scaled to the unit's gain in RMS and
    joined to its neighbours by linear cross-fades. The aspiration noise of a
    unit is a fixed sequence tied to its id, so it belongs to the class rather
    than the view.

    Rendered length is ``sum(n_i) - (L - 1) * crossfade`` samples with
    ``n_i = round(duration_i * sample_rate / tempo)``.
    """

    def __init__(self, cfg: OracleGenConfig = OracleGenConfig()):
        self.cfg = cfg
        self.units = UnitTable.build(cfg)
        self._longest = int(np.ceil(cfg.unit_duration_range[1] * cfg.sample_rate
                                    / cfg.tempo_range[0])) + 1
        self._noise = np.random.default_rng([cfg.template_seed, cfg.n_units, 1]).standard_normal(
            (cfg.n_units, self._longest))

    def new_class(self, rng: np.random.Generator) -> KeywordClass:
        return oracle_new_class(self.cfg, rng)

    def draw_view(self, cls: KeywordClass, rng: np.random.Generator) -> ViewParams:
        c = self.cfg
        j = c.formant_jitter
        pitch = float(rng.uniform(*c.pitch_range_hz))
        tempo = float(rng.uniform(*c.tempo_range))
        jitter = rng.uniform(1.0 - j, 1.0 + j, (len(cls.spec), 2))
        return ViewParams(pitch, tempo, jitter)

    def render(self, cls: KeywordClass, rng: np.random.Generator) -> Waveform:
        return self.render_view(cls, self.draw_view(cls, rng))

    def unit_lengths(self, unit_ids: Sequence[int], tempo: float) -> np.ndarray:
        d = self.units.duration_s[np.asarray(unit_ids)]
        return np.round(d * self.cfg.sample_rate / tempo).astype(int)

    def envelope(self, ids: np.ndarray, freqs: np.ndarray, jitter=None) -> np.ndarray:
        """Spectral envelope (len(ids), len(freqs)) of the given units."""
        f1 = self.units.f1[ids]
        f2 = self.units.f2[ids]
        if jitter is not None:
            f1 = f1 * jitter[:, 0]
            f2 = f2 * jitter[:, 1]
        bw = self.cfg.formant_bandwidth_hz
        return (_resonance(freqs[None, :], f1[:, None], bw)
                + 0.7 * _resonance(freqs[None, :], f2[:, None], bw) + self.cfg.spectral_floor)

    def render_view(self, cls: KeywordClass, view: ViewParams) -> Waveform:
        c = self.cfg
        sr = c.sample_rate
        ids = np.asarray(cls.spec, dtype=int)
        jitter = None if view.jitter is None else np.asarray(view.jitter, dtype=float)
        if jitter is not None and jitter.shape != (len(ids), 2):
            raise ValueError(f"jitter must have shape ({len(ids)}, 2), got {jitter.shape}")
        lengths = self.unit_lengths(ids, view.tempo)
        if lengths.max() > self._longest:
            raise ValueError("tempo outside the configured range")
        xf = c.crossfade
        starts = np.concatenate([[0], np.cumsum(lengths[:-1] - xf)])
        total = int(starts[-1] + lengths[-1])

        f0 = view.pitch_hz
        n_harm = max(1, int(c.max_harmonic_hz // f0))
        harm_f = f0 * np.arange(1, n_harm + 1)
        t = np.arange(total) / sr
        basis = np.sin(2.0 * np.pi * t[:, None] * harm_f[None, :])
        amps = self.envelope(ids, harm_f, jitter)
        # equal power per harmonic and per noise bandwidth f0 / 2 at asp = 1
        noise_gain = np.sqrt(c.aspiration * sr / (4.0 * f0))

        out = np.zeros(total)
        ramp = (np.arange(xf) + 0.5) / xf if xf else np.zeros(0)
        for i, (s, n) in enumerate(zip(starts, lengths)):
            burst = basis[s:s + n] @ amps[i]
            if c.aspiration > 0:
                freqs = np.fft.rfftfreq(n, 1.0 / sr)
                shape = self.envelope(ids[i:i + 1], freqs, None if jitter is None else jitter[i:i + 1])[0]
                shape[freqs >= c.max_harmonic_hz] = 0.0
                burst += noise_gain * np.fft.irfft(np.fft.rfft(self._noise[ids[i], :n]) * shape, n)
            burst *= self.units.gain[ids[i]] / np.sqrt(np.mean(burst ** 2))
            if xf:
                if i > 0:
                    burst[:xf] *= ramp
                if i < len(ids) - 1:
                    burst[-xf:] *= ramp[::-1]
            out[s:s + n] += burst
        out *= c.peak / np.max(np.abs(out))
        return Waveform(out, sr)

    def expected_length(self, cls: KeywordClass, tempo: float = 1.0) -> int:
        lengths = self.unit_lengths(cls.spec, tempo)
        return int(lengths.sum() - (len(lengths) - 1) * self.cfg.crossfade)


def oracle_new_class(cfg: OracleGenConfig, rng: np.random.Generator) -> KeywordClass:
    length = int(rng.integers(cfg.l_min, cfg.l_max + 1))
    units = tuple(int(u) for u in rng.integers(0, cfg.n_units, length))
    class_id = f"{int(rng.integers(0, 2**63)):016x}"
    return KeywordClass(class_id, units)


def write_class_manifest(path, classes: Sequence[KeywordClass]) -> None:
    with open(path, "w") as fh:
        for cls in classes:
            fh.write(f"{cls.class_id}\t{' '.join(str(u) for u in cls.spec)}\n")


def read_class_manifest(path) -> list:
    classes = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            class_id, units = line.rstrip("\n").split("\t")
            classes.append(KeywordClass(class_id, tuple(int(u) for u in units.split())))
    return classes


# ---------------------------------------------------------------------------
# Evaluation corpora
# ---------------------------------------------------------------------------

@dataclass
class Clip:
    clip_id: str
    keyword: str
    path: Path | None = None
    waveform: Waveform | None = None

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        return read_wav(self.path)


@dataclass
class Corpus:
    """Per-keyword support pool and test clips, the input of the open-set protocol."""
    support: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)

    @property
    def keywords(self) -> list:
        return sorted(self.test)

    def iter_clips(self) -> Iterator[tuple]:
        for kw in self.keywords:
            for split, table in (("support", self.support), ("test", self.test)):
                for clip in table.get(kw, []):
                    yield split, clip

    def __len__(self):
        return sum(len(v) for v in self.support.values()) + sum(len(v) for v in self.test.values())


def make_oracle_corpus(source: OracleSource, n_classes: int, n_support: int, n_test: int,
                       rng: np.random.Generator, transform=None) -> Corpus:
    """Fresh oracle classes with independent views for the support pool and test set."""
    corpus = Corpus()
    for _ in range(n_classes):
        cls = source.new_class(rng)
        kw = cls.class_id
        views = []
        for v in range(n_support + n_test):
            w = source.render(cls, rng)
            if transform is not None:
                w = transform(w, rng)
            views.append(Clip(f"{kw}/{v:03d}", kw, waveform=w))
        corpus.support[kw] = views[:n_support]
        corpus.test[kw] = views[n_support:]
    return corpus


class DirectoryDataset:
    """``root/<keyword>/<clip>.wav`` dataset with train/val/test partitions.

    layout="gsc": partitions follow ``validation_list.txt`` and
    ``testing_list.txt``; everything else is train.
    layout="mswc": the first ``test_count`` clips (sorted filename order) are
    test, the rest form the support pool. Keywords can be filtered by clip
    count with exclusive bounds ``(min_count, max_count)``.
    """

    def __init__(self, root, layout: str = "gsc", test_count: int = 250,
                 min_count: int | None = None, max_count: int | None = None):
        self.root = Path(root)
        self.layout = layout
        if not self.root.is_dir():
            raise DatasetError(f"missing dataset root: {self.root}")
        kw_dirs = sorted(p for p in self.root.iterdir()
                         if p.is_dir() and not p.name.startswith(("_", ".")))
        files = {}
        for d in kw_dirs:
            clips = sorted(p.name for p in d.glob("*.wav"))
            if not clips:
                raise DatasetError(f"empty keyword folder: {d}")
            files[d.name] = clips
        if not files:
            raise DatasetError(f"no keyword folders under {self.root}")
        if min_count is not None:
            files = {k: v for k, v in files.items() if len(v) > min_count}
        if max_count is not None:
            files = {k: v for k, v in files.items() if len(v) < max_count}

        self.partitions: dict = {}
        if layout == "gsc":
            val = self._read_list("validation_list.txt")
            test = self._read_list("testing_list.txt")
            for kw, clips in files.items():
                parts = {"train": [], "val": [], "test": []}
                for name in clips:
                    rel = f"{kw}/{name}"
                    key = "test" if rel in test else "val" if rel in val else "train"
                    parts[key].append(rel)
                self.partitions[kw] = parts
        elif layout in ("mswc", "mswc-like"):
            for kw, clips in files.items():
                rels = [f"{kw}/{name}" for name in clips]
                self.partitions[kw] = {"train": rels[test_count:], "val": [],
                                       "test": rels[:test_count]}
        else:
            raise DatasetError(f"unknown layout {layout!r}")

    def _read_list(self, name) -> set:
        path = self.root / name
        if not path.is_file():
            raise DatasetError(f"missing list file: {path}")
        entries = set()
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("/")
                if len(parts) != 2 or not parts[1].endswith(".wav") or not parts[0]:
                    raise DatasetError(f"malformed list file {path}:{lineno}: {line!r}")
                entries.add(line)
        return entries

    @property
    def keywords(self) -> list:
        return sorted(self.partitions)

    def list_classes(self) -> list:
        return [KeywordClass(kw, kw) for kw in self.keywords]

    def new_class(self, rng):
        kws = self.keywords
        return self.list_classes()[int(rng.integers(len(kws)))]

    def render(self, cls, rng):
        pool = self.partitions[cls.spec]["train"]
        return read_wav(self.root / pool[int(rng.integers(len(pool)))])

    def corpus(self, keywords=None) -> Corpus:
        corpus = Corpus()
        for kw in keywords or self.keywords:
            part = self.partitions[kw]
            corpus.support[kw] = [Clip(r, kw, path=self.root / r) for r in part["train"]]
            corpus.test[kw] = [Clip(r, kw, path=self.root / r) for r in part["test"]]
        return corpus


def dir_dataset_open(root, layout: str = "gsc", **kwargs) -> DirectoryDataset:
    return DirectoryDataset(root, layout, **kwargs)
