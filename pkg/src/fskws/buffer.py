"""FIFO reservoir of generated classes from which N-way episodes are drawn."""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .audio import DspConfig, featurize
from .augment import AugmentConfig, AugmentStats, augment
from .sources import KeywordClass


@dataclass(frozen=True)
class BufferConfig:
    m_buffer: int = 32768
    m_update: int = 1
    k_shots: int = 5
    n_way: int = 512

    def __post_init__(self):
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if not 0 <= self.m_update <= self.n_way <= self.m_buffer:
            raise ValueError("need m_update <= n_way <= m_buffer")


@dataclass
class BufferSlot:
    index: int          # global generation counter, also the slot's seed component
    cls: KeywordClass
    views: np.ndarray   # (K+1, T, D) features


@dataclass
class Episode:
    slots: list
    features: np.ndarray  # (N, K+1, T, D); [:, :K] supports, [:, K] query

    @property
    def class_ids(self):
        return [s.cls.class_id for s in self.slots]


class SlotGenerator:
    """Renders, augments and featurizes the K+1 views of one fresh class.

    Every random draw for slot ``i`` comes from ``default_rng([seed, i, ...])``
    so any slot can be regenerated from its index alone.
    """

    def __init__(self, source, k_shots: int, dsp: DspConfig, aug: AugmentConfig | None,
                 seed: int):
        self.source = source
        self.k_shots = k_shots
        self.dsp = dsp
        self.aug = aug
        self.seed = seed
        self.stats = AugmentStats()

    def __call__(self, index: int) -> BufferSlot:
        cls = self.source.new_class(np.random.default_rng([self.seed, index]))
        views = []
        for v in range(self.k_shots + 1):
            rng = np.random.default_rng([self.seed, index, v])
            w = self.source.render(cls, rng)
            if self.aug is not None:
                w = augment(w, self.aug, rng, self.stats)
            views.append(featurize(w, self.dsp))
        return BufferSlot(index, cls, np.stack(views))


class EpisodeBuffer:
    def __init__(self, cfg: BufferConfig, generator: SlotGenerator):
        self.cfg = cfg
        self.generator = generator
        self.slots: deque = deque()
        self.next_index = 0

    def __len__(self):
        return len(self.slots)

    def fill(self, start: int = 0, workers: int = 1):
        """(Re)build the buffer with slots ``start .. start + m_buffer - 1``."""
        indices = range(start, start + self.cfg.m_buffer)
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                slots = list(pool.map(self.generator, indices))
        else:
            slots = [self.generator(i) for i in indices]
        self.slots = deque(slots)
        self.next_index = start + self.cfg.m_buffer

    def refresh(self):
        for _ in range(self.cfg.m_update):
            self.slots.popleft()
            self.slots.append(self.generator(self.next_index))
            self.next_index += 1

    def sample_episode(self, rng: np.random.Generator, n_way: int | None = None) -> Episode:
        n_way = self.cfg.n_way if n_way is None else n_way
        if n_way > len(self.slots):
            raise ValueError(f"n_way={n_way} exceeds buffer size {len(self.slots)}")
        chosen = rng.choice(len(self.slots), size=n_way, replace=False)
        slots = [self.slots[int(i)] for i in chosen]
        feats = np.stack([s.views[rng.permutation(len(s.views))] for s in slots])
        return Episode(slots, feats)

    def manifest_lines(self):
        seed = self.generator.seed
        for s in self.slots:
            views = " ".join(f"{seed}:{s.index}:{v}" for v in range(len(s.views)))
            yield f"{s.index}\t{s.cls.class_id}\t{views}"

    def dump_manifest(self, path):
        with open(path, "w") as fh:
            for line in self.manifest_lines():
                fh.write(line + "\n")


def buffer_init(source, cfg: BufferConfig, dsp: DspConfig, aug: AugmentConfig | None,
                seed: int, start: int = 0, workers: int = 1) -> EpisodeBuffer:
    buf = EpisodeBuffer(cfg, SlotGenerator(source, cfg.k_shots, dsp, aug, seed))
    buf.fill(start, workers)
    return buf


def buffer_sample_episode(buf: EpisodeBuffer, rng: np.random.Generator) -> Episode:
    return buf.sample_episode(rng)


def buffer_refresh(buf: EpisodeBuffer) -> None:
    buf.refresh()
