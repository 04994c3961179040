"""Audio-visual bottleneck Conformer and the joint fusion encoder.

Each AVBC layer runs a per-modality Conformer block over the modality tokens
concatenated with K shared bottleneck tokens; the two updated bottleneck
copies are averaged and fed to the next layer. Nothing else crosses between
the branches, so every cross-modal path goes through the bottleneck.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .frontends import ModalitySequence
from .nn import ConformerBlock, ConformerConfig, ConformerEncoder, Module, conformer_joint, param, sinusoidal_encoding
from .tensor import Tensor

BOTTLENECK_STD = 0.02


@dataclass
class BottleneckState:
    tokens: Tensor  # (K, d)

    @property
    def K(self) -> int:
        return self.tokens.shape[0]


def init_bottleneck(K: int, d: int, seed: int | np.random.Generator) -> BottleneckState:
    if K < 0:
        raise ValueError(f"token count must be non-negative, got {K}")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    return BottleneckState(param(rng.normal(0.0, BOTTLENECK_STD, size=(K, d))))


class AVBCLayer(Module):
    def __init__(self, cfg: ConformerConfig, rng: np.random.Generator):
        self.video = ConformerBlock(cfg, rng)
        self.audio = ConformerBlock(cfg, rng)


class AVBCEncoder(Module):
    def __init__(self, cfg: ConformerConfig, n_layers: int, n_tokens: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ValueError("AVBC needs at least one layer")
        self.cfg = cfg
        self.layers = [AVBCLayer(cfg, rng) for _ in range(n_layers)]
        self.bottleneck = init_bottleneck(n_tokens, cfg.d_model, rng).tokens

    @property
    def n_tokens(self) -> int:
        return self.bottleneck.shape[0]

    def __call__(self, h_v, h_a, video_present: bool = True, bottleneck_mode: str = "average",
                 rng: np.random.Generator | None = None):
        return avbc_encode(h_v, h_a, self, video_present, bottleneck_mode, rng)


def _tokens(x) -> Tensor:
    return x.tokens if isinstance(x, ModalitySequence) else x


def _branch(block: ConformerBlock, h: Tensor, b: Tensor, rng) -> tuple[Tensor, Tensor]:
    n, k = h.shape[0], b.shape[0]
    b_in = b + sinusoidal_encoding(k, b.shape[1], offset=n)
    mask = np.concatenate([np.ones(n, dtype=bool), np.zeros(k, dtype=bool)])
    out = block(T.concat([h, b_in]), mask, rng)
    h_out, b_out = T.split(out, [n, k])
    return h_out, b_out


def avbc_layer(h_v, h_a, b, layer: AVBCLayer, video_present: bool = True,
               bottleneck_mode: str = "average", rng: np.random.Generator | None = None):
    """One bottleneck layer. Returns ``(h_v', h_a', b')``; ``h_v'`` is None without video.

    ``bottleneck_mode="audio"`` passes the audio branch's copy forward instead
    of the average, which severs every video → audio path (probe use).
    K = 0 switches to direct cross-attention: one self-attention over the
    concatenated modalities with branch-specific projections.
    """
    h_a = _tokens(h_a)
    h_v = _tokens(h_v) if video_present else None
    b = b.tokens if isinstance(b, BottleneckState) else b
    if h_v is not None and h_v.shape[1] != h_a.shape[1]:
        raise ValueError(f"branch width mismatch: video d={h_v.shape[1]} audio d={h_a.shape[1]}")
    if b.shape[1] != h_a.shape[1]:
        raise ValueError(f"bottleneck width {b.shape[1]} != token width {h_a.shape[1]}")
    if bottleneck_mode not in ("average", "audio"):
        raise ValueError(f"unknown bottleneck mode {bottleneck_mode!r}")

    if b.shape[0] == 0:
        segments = [(layer.audio, h_a, None)]
        if h_v is not None:
            segments.append((layer.video, h_v, None))
        outs = conformer_joint(segments, rng)
        return (outs[1] if h_v is not None else None), outs[0], b

    h_v_new = b_v = None
    if h_v is not None:
        h_v_new, b_v = _branch(layer.video, h_v, b, rng)
    h_a_new, b_a = _branch(layer.audio, h_a, b, rng)
    if b_v is None or bottleneck_mode == "audio":
        b_new = b_a
    else:
        b_new = (b_v + b_a) * 0.5
    return h_v_new, h_a_new, b_new


def avbc_encode(h_v, h_a, encoder: AVBCEncoder, video_present: bool = True,
                bottleneck_mode: str = "average", rng: np.random.Generator | None = None):
    """Apply all AVBC layers; returns ``(z_v, z_a)`` as ModalitySequences (z_v None without video)."""
    hv = _tokens(h_v) if video_present else None
    ha = _tokens(h_a)
    b = encoder.bottleneck
    for layer in encoder.layers:
        hv, ha, b = avbc_layer(hv, ha, b, layer, video_present, bottleneck_mode, rng)
    z_v = ModalitySequence(hv, "video") if hv is not None else None
    return z_v, ModalitySequence(ha, "audio")


def fusion_encode(z_a, z_v, encoder: ConformerEncoder, rng: np.random.Generator | None = None):
    """Joint Conformer over the time-concatenation ``z_a ∥ z_v``; split back at N_a."""
    za = _tokens(z_a)
    if z_v is None:
        return ModalitySequence(encoder(za, add_positions=False, rng=rng), "fused-audio"), None
    zv = _tokens(z_v)
    if za.shape[1] != zv.shape[1]:
        raise ValueError(f"fusion width mismatch: {za.shape[1]} vs {zv.shape[1]}")
    fused = encoder(T.concat([za, zv]), add_positions=False, rng=rng)
    f_a, f_v = T.split(fused, [za.shape[0], zv.shape[0]])
    return ModalitySequence(f_a, "fused-audio"), ModalitySequence(f_v, "fused-video")


def attention_cost(n_audio: int, n_video: int, n_tokens: int) -> tuple[int, int]:
    """Score-matrix entries per layer: (bottleneck routing, direct joint attention)."""
    if min(n_audio, n_video, n_tokens) < 0:
        raise ValueError("sizes must be non-negative")
    bottleneck = (n_tokens + n_audio) ** 2 + (n_tokens + n_video) ** 2
    direct = (n_audio + n_video) ** 2
    return bottleneck, direct
