"""Prototypical-network objective and the episodic training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .audio import DspConfig
from .augment import AugmentConfig
from .buffer import BufferConfig, EpisodeBuffer, buffer_init
from .encoder import (AdamState, Encoder, EncoderConfig, adam_step, cosine_lr,
                      load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)

DISTANCES = ("squared_euclidean", "euclidean")


@dataclass
class PrototypeSet:
    prototypes: np.ndarray
    class_ids: list

    def __post_init__(self):
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("class_ids must be distinct")
        if len(self.class_ids) != len(self.prototypes):
            raise ValueError("one class id per prototype")

    def __len__(self):
        return len(self.class_ids)


def compute_prototypes(embeddings, class_ids=None) -> PrototypeSet:
    """Row n is the mean of class n's K support embeddings (N, K, D)."""
    emb = np.asarray(embeddings)
    if emb.ndim != 3 or emb.shape[1] == 0:
        raise ValueError("need a non-empty (N, K, D) support array")
    ids = list(range(len(emb))) if class_ids is None else list(class_ids)
    return PrototypeSet(emb.mean(axis=1), ids)


def pairwise_sq_distances(queries, prototypes):
    diff = queries[:, None, :] - prototypes[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def pairwise_distances(queries, prototypes, distance="squared_euclidean"):
    q = np.atleast_2d(queries)
    d = pairwise_sq_distances(q, np.atleast_2d(prototypes))
    if distance == "squared_euclidean":
        return d
    if distance == "euclidean":
        return np.sqrt(d)
    raise ValueError(f"unknown distance {distance!r}")


def softmax_neg(d):
    d = np.asarray(d, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite distance")
    z = -d - np.max(-d, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_posteriors(query_emb, protos: PrototypeSet, distance="squared_euclidean"):
    d = pairwise_distances(np.asarray(query_emb, dtype=np.float64)[None],
                           protos.prototypes.astype(np.float64), distance)[0]
    return softmax_neg(d)


def episode_loss(embeddings, distance="squared_euclidean"):
    """Mean cross-entropy of each class's single query against the prototypes.

    ``embeddings`` is (N, K+1, D): the first K entries per class are supports,
    the last is the query. Returns ``(loss, grad)`` with grad shaped like the
    input; supports receive gradient through the prototype mean.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    N, K1, D = emb.shape
    if N < 2:
        raise ValueError("episode needs at least 2 classes")
    if K1 < 2:
        raise ValueError("episode needs at least one support and one query")
    K = K1 - 1
    supports, queries = emb[:, :K], emb[:, K]
    protos = supports.mean(axis=1)
    sq = pairwise_sq_distances(queries, protos)
    if distance == "squared_euclidean":
        d = sq
    elif distance == "euclidean":
        d = np.sqrt(sq)
    else:
        raise ValueError(f"unknown distance {distance!r}")
    logits = -d
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(N), np.arange(N)]))

    p = np.exp(logits - lse[:, None])
    dd = (np.eye(N) - p) / N                     # dL/d d[q, n]
    if distance == "euclidean":
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = np.where(d > 0, dd / (2.0 * d), 0.0)
    # d sq[q,n] = |q - c_n|^2
    dq = 2.0 * (dd.sum(axis=1)[:, None] * queries - dd @ protos)
    dc = -2.0 * (dd.T @ queries - dd.sum(axis=0)[:, None] * protos)
    grad = np.empty_like(emb)
    grad[:, :K] = dc[:, None, :] / K
    grad[:, K] = dq
    return loss, grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 512
    k_shots: int = 5
    total_steps: int = 300_000
    lr: float = 0.001
    lr_min: float = 0.0
    distance: str = "squared_euclidean"
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


class TrainingError(Exception):
    pass


GEN_STREAM, TRAIN_STREAM, CORPUS_STREAM, EVAL_STREAM = 1, 2, 3, 4


def stream_seed(seed: int, stream: int) -> int:
    """Independent sub-seed for a named randomness stream."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class TrainResult:
    encoder: Encoder
    adam: AdamState
    losses: list = field(default_factory=list)
    step: int = 0


def train(source, dsp: DspConfig, aug: AugmentConfig | None, buf_cfg: BufferConfig,
          enc_cfg: EncoderConfig, cfg: TrainConfig, out_dir=None, resume=None,
          workers: int = 1, steps: int | None = None, log_timing: bool = True) -> TrainResult:
    """Episodic training: sample episode, forward, loss, backward, Adam, refresh.

    ``steps`` stops early (e.g. to test resumption) without altering the
    cosine schedule, which always spans ``cfg.total_steps``. Writes
    ``loss.jsonl`` (step, lr, loss), ``timing.jsonl`` (step, wall_ms) and
    checkpoints into ``out_dir`` when given.
    """
    if buf_cfg.k_shots != cfg.k_shots or buf_cfg.n_way != cfg.n_way:
        raise ValueError("buffer and train configs disagree on n_way/k_shots")
    gen_seed = stream_seed(cfg.seed, GEN_STREAM)
    if resume is not None:
        ck = load_checkpoint(resume)
        enc, adam, start = ck.encoder, ck.adam, ck.step
        if enc.config != enc_cfg:
            raise ValueError("checkpoint encoder config differs from requested config")
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
    else:
        enc = Encoder(enc_cfg, seed=stream_seed(cfg.seed, TRAIN_STREAM))
        adam = AdamState.zeros_like(enc.params)
        start = 0
        rng = np.random.default_rng(stream_seed(cfg.seed, TRAIN_STREAM) + 1)
    buf = buffer_init(source, buf_cfg, dsp, aug, gen_seed,
                      start=start * buf_cfg.m_update, workers=workers)

    out = Path(out_dir) if out_dir is not None else None
    loss_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if resume is not None else "w"
        loss_fh = open(out / "loss.jsonl", mode)
        if log_timing:
            timing_fh = open(out / "timing.jsonl", mode)
        if resume is None:
            buf.dump_manifest(out / "buffer_manifest.tsv")

    end = cfg.total_steps if steps is None else min(cfg.total_steps, start + steps)
    result = TrainResult(enc, adam, step=start)
    try:
        for step in range(start, end):
            t0 = time.perf_counter()
            lr = cosine_lr(step, cfg.total_steps, cfg.lr, cfg.lr_min)
            ep = buf.sample_episode(rng)
            N, K1 = ep.features.shape[:2]
            x = ep.features.reshape(N * K1, *ep.features.shape[2:])
            emb, trace = enc.forward(x, train=True)
            loss, g = episode_loss(emb.reshape(N, K1, -1), cfg.distance)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            grads = enc.backward(trace, g.reshape(N * K1, -1))
            adam_step(enc.params, grads, adam, lr)
            buf.refresh()
            result.losses.append(loss)
            result.step = step + 1
            if loss_fh is not None:
                loss_fh.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")
            if timing_fh is not None:
                wall_ms = (time.perf_counter() - t0) * 1000.0
                timing_fh.write(json.dumps({"step": step, "wall_ms": round(wall_ms, 3)}) + "\n")
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                recent = result.losses[-cfg.log_every:]
                log.info("step %d lr %.2e loss %.4f", step + 1, lr, float(np.mean(recent)))
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{step + 1:07d}.npz", enc, adam, step + 1,
                                rng.bit_generator.state)
    finally:
        if loss_fh is not None:
            loss_fh.close()
        if timing_fh is not None:
            timing_fh.close()
    if out is not None:
        save_checkpoint(out / "final.npz", enc, adam, result.step, rng.bit_generator.state)
    return result
