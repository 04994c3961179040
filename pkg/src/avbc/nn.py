"""Neural building blocks on top of :mod:`avbc.tensor`.

Sequences are ``(N, d)`` tensors (optionally with leading batch axes for the
decoder). Everything is channels-last.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

# ----------------------------------------------------------- instrumentation
_ATTN_COUNTERS: list["AttentionCounter"] = []
_ATTN_OVERRIDE: list[str] = []


class AttentionCounter:
    """Accumulates score-matrix entries (Nq * Nk per attention call)."""

    def __init__(self):
        self.entries = 0
        self.calls: list[tuple[int, int]] = []

    def record(self, nq: int, nk: int, batch: int = 1) -> None:
        self.entries += nq * nk * batch
        self.calls.append((nq, nk))


@contextlib.contextmanager
def count_attention() -> Iterator[AttentionCounter]:
    counter = AttentionCounter()
    _ATTN_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _ATTN_COUNTERS.remove(counter)


@contextlib.contextmanager
def attention_override(mode: str = "identity"):
    """Force every square self-attention map to the identity (probe use only)."""
    if mode != "identity":
        raise ValueError(f"unknown attention override {mode!r}")
    _ATTN_OVERRIDE.append(mode)
    try:
        yield
    finally:
        _ATTN_OVERRIDE.pop()


# ------------------------------------------------------------------- modules
class Module:
    """Parameter container; parameters are leaf tensors with requires_grad."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=T.get_default_dtype()), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Variance 2 / fan_in: keeps activations O(1) through (Si)LU stacks."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None or not T.is_grad_enabled():
        return x
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.data.dtype)
    return x * keep


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(xavier_uniform(rng, d_in, d_out, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ConvNd(Module):
    """Channels-last convolution via :func:`avbc.tensor.unfold`.

    Input ``(*spatial, C_in)``; output ``(*out_spatial, C_out)``.
    """

    def __init__(self, c_in: int, c_out: int, kernel: Sequence[int], rng: np.random.Generator,
                 stride: Sequence[int] | None = None, padding: Sequence[int] | None = None, init: str = "he"):
        self.kernel = tuple(kernel)
        self.stride = tuple(stride or (1,) * len(kernel))
        self.padding = tuple((k - 1) // 2 for k in kernel) if padding is None else tuple(padding)
        taps = int(np.prod(self.kernel))
        shape = (c_in * taps, c_out)
        # he for convs feeding a nonlinearity; xavier for linear output heads
        w = he_uniform(rng, c_in * taps, shape) if init == "he" else xavier_uniform(rng, c_in * taps, c_out * taps, shape)
        self.weight = param(w)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        cols = T.unfold(x, self.kernel, self.stride, self.padding)
        return T.matmul(cols, self.weight) + self.bias


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with same padding.

    ``x`` is ``(N, C)``, ``weight`` is ``(C, k)`` with k odd.
    """
    n, c = x.shape
    k = weight.shape[1]
    if k % 2 != 1:
        raise ValueError(f"depthwise kernel must be odd, got {k}")
    if n < 1:
        raise ValueError("depthwise conv needs at least one frame")
    cols = T.unfold(x, (k,), (1,), ((k - 1) // 2,)).reshape(n, c, k)
    return (cols * weight).sum(axis=-1) + bias


def sinusoidal_encoding(n: int, d: int, offset: int = 0) -> np.ndarray:
    pos = np.arange(offset, offset + n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: d // 2])
    return pe.astype(T.get_default_dtype())


# ----------------------------------------------------------------- attention
def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         mask: np.ndarray | None = None, return_weights: bool = False):
    """Per-head softmax(q kᵀ / √d_h) v on already-projected inputs.

    ``mask`` is a boolean ``(Nq, Nk)`` array of allowed positions.
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"d_model {d} not divisible by {heads} heads")
    nq, nk = q.shape[-2], k.shape[-2]
    if nk == 0:
        raise ValueError("attention over zero keys")
    batch = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
    for counter in _ATTN_COUNTERS:
        counter.record(nq, nk, batch)
    if _ATTN_OVERRIDE and nq == nk:
        return (v, np.eye(nq)) if return_weights else v
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // heads))
    weights = T.softmax(scores, axis=-1, mask=mask)
    out = _merge_heads(T.matmul(weights, vh))
    return (out, weights.data) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"d_model {d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor | None = None,
                 mask: np.ndarray | None = None) -> Tensor:
        value = key if value is None else value
        ctx = scaled_dot_attention(self.q_proj(query), self.k_proj(key), self.v_proj(value),
                                   self.heads, mask)
        return self.out_proj(ctx)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, module: MultiHeadAttention,
                         mask: np.ndarray | None = None) -> Tensor:
    return module(q, k, v, mask)


# ------------------------------------------------------------------ conformer
@dataclass(frozen=True)
class ConformerConfig:
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    conv_kernel: int = 7
    layers: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 != 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(self.norm(x))))


class ConvModule(Module):
    """Pointwise → GLU → depthwise → norm → SiLU → pointwise.

    Per-utterance LayerNorm stands in for batch norm.
    """

    def __init__(self, d: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 != 1:
            raise ValueError(f"conv kernel must be odd, got {kernel}")
        self.norm = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng)
        self.dw_weight = param(xavier_uniform(rng, kernel, kernel, (d, kernel)))
        self.dw_bias = param(np.zeros(d))
        self.dw_norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] < 1:
            raise ValueError("conv module needs at least one frame")
        y = T.glu(self.pw1(self.norm(x)), axis=-1)
        y = depthwise_conv1d(y, self.dw_weight, self.dw_bias)
        return self.pw2(T.silu(self.dw_norm(y)))


class ConformerBlock(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.ff1 = FeedForward(d, cfg.ffn_dim, rng)
        self.attn_norm = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.conv = ConvModule(d, cfg.conv_kernel, rng)
        self.ff2 = FeedForward(d, cfg.ffn_dim, rng)
        self.out_norm = LayerNorm(d)

    def __call__(self, x: Tensor, conv_mask: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        return conformer_joint([(self, x, conv_mask)], rng)[0]


def _apply_conv(block: ConformerBlock, x: Tensor, conv_mask: np.ndarray | None) -> Tensor:
    n = x.shape[0]
    if conv_mask is None:
        return x + block.conv(x)
    conv_mask = np.asarray(conv_mask, dtype=bool)
    if conv_mask.shape != (n,):
        raise ValueError(f"conv_mask length {conv_mask.shape} does not match sequence length {n}")
    if conv_mask.all():
        return x + block.conv(x)
    if not conv_mask.any():
        return x
    rows = np.flatnonzero(conv_mask)
    y = block.conv(x[rows])
    scatter = np.zeros((n, rows.size), dtype=x.dtype)
    scatter[rows, np.arange(rows.size)] = 1.0
    return x + T.matmul(Tensor(scatter), y)


def conformer_joint(segments: Sequence[tuple[ConformerBlock, Tensor, np.ndarray | None]],
                    rng: np.random.Generator | None = None) -> list[Tensor]:
    """Run Conformer blocks whose self-attention spans every segment jointly.

    Each segment uses its own block's parameters for the feed-forward, the
    q/k/v/out projections and the convolution; attention scores are computed
    over the concatenation of all segments. With one segment this is the
    plain Conformer block.
    """
    xs = []
    for blk, x, _ in segments:
        xs.append(x + 0.5 * dropout(blk.ff1(x), blk.cfg.dropout, rng))
    qs, ks, vs = [], [], []
    for (blk, _, _), x in zip(segments, xs):
        h = blk.attn_norm(x)
        qs.append(blk.attn.q_proj(h))
        ks.append(blk.attn.k_proj(h))
        vs.append(blk.attn.v_proj(h))
    heads = segments[0][0].cfg.heads
    if len(segments) == 1:
        ctx = [scaled_dot_attention(qs[0], ks[0], vs[0], heads)]
    else:
        sizes = [x.shape[0] for x in xs]
        joint = scaled_dot_attention(T.concat(qs), T.concat(ks), T.concat(vs), heads)
        ctx = T.split(joint, sizes)
    out = []
    for (blk, _, mask), x, c in zip(segments, xs, ctx):
        x = x + dropout(blk.attn.out_proj(c), blk.cfg.dropout, rng)
        x = _apply_conv(blk, x, mask)
        x = x + 0.5 * dropout(blk.ff2(x), blk.cfg.dropout, rng)
        out.append(blk.out_norm(x))
    return out


class ConformerEncoder(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [ConformerBlock(cfg, rng) for _ in range(cfg.layers)]

    def __call__(self, x: Tensor, add_positions: bool = True,
                 rng: np.random.Generator | None = None) -> Tensor:
        if add_positions:
            x = x + sinusoidal_encoding(x.shape[0], x.shape[1])
        for blk in self.blocks:
            x = blk(x, rng=rng)
        return x


# ------------------------------------------------------------ sub-pixel conv
def pixel_shuffle_1d(x: Tensor, r: int) -> Tensor:
    """``(N, C*r)`` → ``(N*r, C)``; out[t*r + j, c] = in[t, c*r + j]."""
    n, cr = x.shape
    if r < 1 or cr % r:
        raise ValueError(f"channel count {cr} not divisible by upscale factor {r}")
    c = cr // r
    return x.reshape(n, c, r).swapaxes(1, 2).reshape(n * r, c)


def pixel_unshuffle_1d(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle_1d`."""
    nr, c = x.shape
    if r < 1 or nr % r:
        raise ValueError(f"frame count {nr} not divisible by factor {r}")
    n = nr // r
    return x.reshape(n, r, c).swapaxes(1, 2).reshape(n, c * r)


class SubPixelConv1d(Module):
    """1-D convolution to ``C*r`` channels followed by the periodic shuffle."""

    def __init__(self, d_in: int, channels: int, r: int, rng: np.random.Generator, kernel: int = 3):
        self.r = r
        self.channels = channels
        self.conv = ConvNd(d_in, channels * r, (kernel,), rng, init="xavier")

    def __call__(self, x: Tensor) -> Tensor:
        return pixel_shuffle_1d(self.conv(x), self.r)


def subpixel_upsample_1d(x: Tensor, r: int, layer: SubPixelConv1d | None = None) -> Tensor:
    return pixel_shuffle_1d(x if layer is None else layer.conv(x), r)
