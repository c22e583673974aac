"""TC-ResNet style temporal CNN with a GRU head, in plain numpy.

Layout convention: activations are (batch, time, channels). Convolutions are
"same"-padded along time and lowered to a single matmul over im2col windows.
Layer functions follow the forward-returns-cache / backward-consumes-cache
pattern; ``Encoder.backward`` replays the caches in reverse.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class EncoderError(Exception):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 40
    base_channels: tuple = (16, 24, 32, 48)
    width_multiplier: int = 2
    first_kernel: int = 3
    block_kernel: int = 9
    block_strides: tuple = (2, 2, 2)
    gru_hidden: int = 192
    embed_dim: int = 192
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, "block_strides", tuple(int(s) for s in self.block_strides))
        if len(self.base_channels) != len(self.block_strides) + 1:
            raise ValueError("need one more channel entry than block strides")
        sizes = (self.input_dim, self.width_multiplier, self.first_kernel, self.block_kernel,
                 self.gru_hidden, self.embed_dim, *self.base_channels, *self.block_strides)
        if min(sizes) <= 0:
            raise ValueError("all encoder sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def channels(self) -> tuple:
        return tuple(c * self.width_multiplier for c in self.base_channels)

    @property
    def min_frames(self) -> int:
        return int(np.prod(self.block_strides))

    @classmethod
    def tiny(cls, **kw) -> "EncoderConfig":
        base = dict(base_channels=(4, 6, 8, 12), width_multiplier=1, gru_hidden=8,
                    embed_dim=16, dtype="float64")
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def conv_forward(x, w, stride=1):
    """x: (B, T, C); w: (k, C, O) -> (B, T_out, O)."""
    B, T, C = x.shape
    k, _, O = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, k - 1 - pad), (0, 0))) if k > 1 else x
    t_out = (T - 1) // stride + 1
    win = sliding_window_view(xp, k, axis=1)[:, ::stride][:, :t_out]
    cols = win.transpose(0, 1, 3, 2).reshape(B * t_out, k * C)
    y = (cols @ w.reshape(k * C, O)).reshape(B, t_out, O)
    return y, (cols, x.shape, stride, pad, t_out)


def conv_backward(dy, w, cache, need_dx=True):
    cols, (B, T, C), stride, pad, t_out = cache
    k, _, O = w.shape
    dy2 = dy.reshape(-1, O)
    dw = (cols.T @ dy2).reshape(k, C, O)
    if not need_dx:
        return None, dw
    dcols = (dy2 @ w.reshape(k * C, O).T).reshape(B, t_out, k, C)
    dxp = np.zeros((B, T + k - 1, C), dtype=dy.dtype)
    span = stride * (t_out - 1) + 1
    for j in range(k):
        dxp[:, j:j + span:stride] += dcols[:, :, j]
    return dxp[:, pad:pad + T], dw


def bn_forward(x, gamma, beta, eps, train, running_mean=None, running_var=None):
    if train:
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, mu, var)


def bn_backward(dy, cache):
    xhat, inv, gamma, _, _ = cache
    n = dy.shape[0] * dy.shape[1]
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=(0, 1))
                      - xhat * (dxhat * xhat).sum(axis=(0, 1)))
    return dx, dgamma, dbeta


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_forward(x, w_ih, w_hh, b_ih, b_hh):
    """Single-layer GRU from a zero state; returns all hidden states (B, T, H)."""
    B, T, I = x.shape
    H = w_hh.shape[0]
    gi = (x.reshape(B * T, I) @ w_ih + b_ih).reshape(B, T, 3 * H)
    h = np.zeros((B, H), dtype=x.dtype)
    hs, steps = [], []
    for t in range(T):
        gh = h @ w_hh + b_hh
        r = sigmoid(gi[:, t, :H] + gh[:, :H])
        z = sigmoid(gi[:, t, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, t, 2 * H:] + r * gh[:, 2 * H:])
        steps.append((h, r, z, n, gh[:, 2 * H:]))
        h = (1.0 - z) * n + z * h
        hs.append(h)
    return np.stack(hs, axis=1), (x, steps)


def gru_backward(dhs, w_ih, w_hh, cache):
    """dhs: gradient w.r.t. every hidden state (B, T, H)."""
    x, steps = cache
    B, T, I = x.shape
    H = w_hh.shape[0]
    dgi = np.empty((B, T, 3 * H), dtype=dhs.dtype)
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * H, dtype=dhs.dtype)
    dh = np.zeros((B, H), dtype=dhs.dtype)
    for t in reversed(range(T)):
        h_prev, r, z, n, ghn = steps[t]
        dh = dh + dhs[:, t]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dn_pre = dn * (1.0 - n * n)
        dr_pre = dn_pre * ghn * r * (1.0 - r)
        dz_pre = dz * z * (1.0 - z)
        dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dgi[:, t] = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
        dw_hh += h_prev.T @ dgh
        db_hh += dgh.sum(axis=0)
        dh = dh * z + dgh @ w_hh.T
    dgi2 = dgi.reshape(B * T, 3 * H)
    dw_ih = x.reshape(B * T, I).T @ dgi2
    db_ih = dgi2.sum(axis=0)
    dx = (dgi2 @ w_ih.T).reshape(B, T, I)
    return dx, dw_ih, dw_hh, db_ih, db_hh


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass
class ForwardTrace:
    config: EncoderConfig
    caches: list = field(default_factory=list)
    batch: int = 0


class Encoder:
    """Embedding network: stem conv, residual temporal blocks, GRU, linear head.

    ``params`` holds trainable tensors and ``stats`` the batch-norm running
    statistics; both are flat dicts keyed by dotted layer names.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0,
                 zero_projection: bool = False):
        self.config = config
        self.params: dict = {}
        self.stats: dict = {}
        self._init(np.random.default_rng(seed), zero_projection)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _bn_names(self):
        names = ["stem.bn"]
        for i in range(len(self.config.block_strides)):
            names += [f"block{i}.bn1", f"block{i}.bn2"]
            if self._has_shortcut_conv(i):
                names.append(f"block{i}.bn_short")
        return names

    def _has_shortcut_conv(self, i):
        ch = self.config.channels
        return self.config.block_strides[i] != 1 or ch[i] != ch[i + 1]

    def _init(self, rng, zero_projection):
        c = self.config
        ch = c.channels
        p = {}

        def he(k, cin, cout):
            bound = np.sqrt(6.0 / (k * cin))
            return rng.uniform(-bound, bound, (k, cin, cout))

        p["stem.w"] = he(c.first_kernel, c.input_dim, ch[0])
        for i in range(len(c.block_strides)):
            p[f"block{i}.conv1.w"] = he(c.block_kernel, ch[i], ch[i + 1])
            p[f"block{i}.conv2.w"] = he(c.block_kernel, ch[i + 1], ch[i + 1])
            if self._has_shortcut_conv(i):
                p[f"block{i}.short.w"] = he(1, ch[i], ch[i + 1])
        H = c.gru_hidden
        bound = 1.0 / np.sqrt(H)
        p["gru.w_ih"] = rng.uniform(-bound, bound, (ch[-1], 3 * H))
        p["gru.w_hh"] = np.concatenate([_orthogonal(rng, H) for _ in range(3)], axis=1)
        p["gru.b_ih"] = np.zeros(3 * H)
        p["gru.b_hh"] = np.zeros(3 * H)
        bound = np.sqrt(6.0 / (H + c.embed_dim))
        p["proj.w"] = (np.zeros((H, c.embed_dim)) if zero_projection
                       else rng.uniform(-bound, bound, (H, c.embed_dim)))
        p["proj.b"] = np.zeros(c.embed_dim)
        for name in self._bn_names():
            n = p[self._bn_weight_of(name)].shape[-1]
            p[f"{name}.gamma"] = np.ones(n)
            p[f"{name}.beta"] = np.zeros(n)
            self.stats[f"{name}.running_mean"] = np.zeros(n, dtype=self.dtype)
            self.stats[f"{name}.running_var"] = np.ones(n, dtype=self.dtype)
        self.params = {k: v.astype(self.dtype) for k, v in sorted(p.items())}

    @staticmethod
    def _bn_weight_of(bn_name):
        prefix, bn = bn_name.rsplit(".", 1)
        conv = {"bn": "w", "bn1": "conv1.w", "bn2": "conv2.w", "bn_short": "short.w"}[bn]
        return f"{prefix}.{conv}"

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward -----------------------------------------------------------

    def _bn(self, name, x, train, trace):
        p, s = self.params, self.stats
        y, cache = bn_forward(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.config.bn_eps,
                              train, s[f"{name}.running_mean"], s[f"{name}.running_var"])
        if train:
            trace.caches.append(("bn", name, cache))
        return y

    def _conv(self, name, x, stride, train, trace):
        y, cache = conv_forward(x, self.params[name], stride)
        if train:
            trace.caches.append(("conv", name, cache))
        return y

    def _relu(self, x, train, trace):
        mask = x > 0
        if train:
            trace.caches.append(("relu", None, mask))
        return x * mask

    def forward(self, x, train: bool = False, update_stats: bool = True):
        """Embed a (B, T, input_dim) batch.

        Train mode normalizes with batch statistics, updates running
        statistics (unless ``update_stats`` is False) and returns
        ``(embeddings, trace)``; infer mode returns embeddings only.
        """
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != c.input_dim:
            raise EncoderError(f"expected (B, T, {c.input_dim}) input, got {x.shape}")
        if x.shape[1] < c.min_frames:
            raise EncoderError(f"sequence too short: T={x.shape[1]} < {c.min_frames}")
        trace = ForwardTrace(c, batch=x.shape[0]) if train else None
        caches_before = 0

        h = self._conv("stem.w", x, 1, train, trace)
        h = self._relu(self._bn("stem.bn", h, train, trace), train, trace)
        self._check(h, "stem")
        for i, stride in enumerate(c.block_strides):
            if train:
                trace.caches.append(("fork", i, None))
            y = self._conv(f"block{i}.conv1.w", h, stride, train, trace)
            y = self._relu(self._bn(f"block{i}.bn1", y, train, trace), train, trace)
            y = self._conv(f"block{i}.conv2.w", y, 1, train, trace)
            y = self._bn(f"block{i}.bn2", y, train, trace)
            if train:
                trace.caches.append(("join", i, None))
            if self._has_shortcut_conv(i):
                s = self._conv(f"block{i}.short.w", h, stride, train, trace)
                s = self._relu(self._bn(f"block{i}.bn_short", s, train, trace), train, trace)
            else:
                s = h
            if train:
                trace.caches.append(("merge", i, None))
            h = self._relu(y + s, train, trace)
            self._check(h, f"block{i}")

        p = self.params
        hs, gcache = gru_forward(h, p["gru.w_ih"], p["gru.w_hh"], p["gru.b_ih"], p["gru.b_hh"])
        self._check(hs, "gru")
        last = hs[:, -1]
        out = last @ p["proj.w"] + p["proj.b"]
        self._check(out, "proj")
        if not train:
            return out
        trace.caches.append(("gru", None, gcache))
        trace.caches.append(("proj", None, last))
        if update_stats:
            self._update_running_stats(trace)
        return out, trace

    def _update_running_stats(self, trace):
        m = self.config.bn_momentum
        for kind, name, cache in trace.caches:
            if kind != "bn":
                continue
            xhat = cache[0]
            n = xhat.shape[0] * xhat.shape[1]
            mu, var = cache[3], cache[4]
            unbiased = var * n / max(n - 1, 1)
            rm, rv = f"{name}.running_mean", f"{name}.running_var"
            self.stats[rm] = ((1 - m) * self.stats[rm] + m * mu).astype(self.dtype)
            self.stats[rv] = ((1 - m) * self.stats[rv] + m * unbiased).astype(self.dtype)

    @staticmethod
    def _check(a, where):
        if not np.all(np.isfinite(a)):
            raise EncoderError(f"non-finite activation after layer {where}")

    def embed(self, features, batch_size: int = 256) -> np.ndarray:
        """Infer-mode embeddings of a (N, T, D) array, processed in chunks."""
        features = np.asarray(features)
        if len(features) == 0:
            return np.zeros((0, self.config.embed_dim), dtype=self.dtype)
        chunks = [self.forward(features[i:i + batch_size])
                  for i in range(0, len(features), batch_size)]
        return np.concatenate(chunks, axis=0)

    # -- backward ----------------------------------------------------------

    def backward(self, trace: ForwardTrace, grad_out) -> dict:
        """Exact parameter gradients for the traced train-mode forward."""
        if trace is None or trace.config != self.config:
            raise EncoderError("trace does not belong to this encoder configuration")
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        if grad_out.shape != (trace.batch, self.config.embed_dim):
            raise EncoderError(f"grad_out shape {grad_out.shape} does not match trace")
        p = self.params
        g = {k: np.zeros_like(v) for k, v in p.items()}
        caches = list(trace.caches)

        _, _, last = caches.pop()
        g["proj.w"] = last.T @ grad_out
        g["proj.b"] = grad_out.sum(axis=0)
        dlast = grad_out @ p["proj.w"].T
        _, _, gcache = caches.pop()
        B, T = gcache[0].shape[:2]
        dhs = np.zeros((B, T, self.config.gru_hidden), dtype=self.dtype)
        dhs[:, -1] = dlast
        dh, g["gru.w_ih"], g["gru.w_hh"], g["gru.b_ih"], g["gru.b_hh"] = gru_backward(
            dhs, p["gru.w_ih"], p["gru.w_hh"], gcache)

        # walk the residual graph backwards; the stack holds pending gradients
        residual = None
        while caches:
            kind, name, cache = caches.pop()
            if kind == "relu":
                dh = dh * cache
            elif kind == "bn":
                dh, g[f"{name}.gamma"], g[f"{name}.beta"] = bn_backward(dh, cache)
            elif kind == "conv":
                need_dx = name != "stem.w"
                dh, g[name] = conv_backward(dh, p[name], cache, need_dx)
            elif kind == "merge":
                residual = dh  # gradient reaching both the main path and the shortcut
            elif kind == "join":
                # shortcut branch finished: dh is its input gradient (or residual itself)
                shortcut_dx = dh if self._has_shortcut_conv(name) else residual
                dh = residual
                residual = shortcut_dx
            elif kind == "fork":
                dh = dh + residual
                residual = None
        return g


def encoder_forward(enc: Encoder, batch, mode: str = "infer"):
    return enc.forward(batch, train=(mode == "train"))


def encoder_backward(enc: Encoder, trace: ForwardTrace, grad_out) -> dict:
    return enc.backward(trace, grad_out)


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError("params, grads and optimizer state have different keys")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"shape mismatch for {k}: {g.shape} vs {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def cosine_lr(step: int, total_steps: int, lr_base: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    if total_steps == 0:
        return lr_base
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, enc: Encoder, adam: AdamState | None = None,
                    step: int = 0, rng_state: dict | None = None, extra: dict | None = None):
    """Atomic .npz checkpoint: tensors by name plus a JSON metadata blob."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "encoder_config": asdict(enc.config),
        "step": int(step),
        "rng_state": rng_state,
        "adam": None if adam is None else {
            "step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in enc.params.items()}
    arrays.update({f"stat/{k}": v for k, v in enc.stats.items()})
    if adam is not None:
        arrays.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in adam.v.items()})
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **dict(sorted(arrays.items())))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    encoder: Encoder
    adam: AdamState | None
    step: int
    rng_state: dict | None
    extra: dict


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise EncoderError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = EncoderConfig(**meta["encoder_config"])
        enc = Encoder(cfg)
        enc.params = {k[6:]: z[k] for k in sorted(z.files) if k.startswith("param/")}
        enc.stats = {k[5:]: z[k] for k in sorted(z.files) if k.startswith("stat/")}
        adam = None
        if meta["adam"] is not None:
            adam = AdamState({k[7:]: z[k] for k in sorted(z.files) if k.startswith("adam_m/")},
                             {k[7:]: z[k] for k in sorted(z.files) if k.startswith("adam_v/")},
                             **meta["adam"])
    return Checkpoint(enc, adam, meta["step"], meta["rng_state"], meta["extra"])
