"""Spectrogram reconstruction head and the enhancement losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .frontends import AudioFrontend, ModalitySequence, Spectrogram
from .nn import Module, SubPixelConv1d
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class EnhanceWeights:
    alpha_recon: float = 0.1
    alpha_percep: float = 0.1

    def __post_init__(self):
        if self.alpha_recon < 0 or self.alpha_percep < 0:
            raise ValueError("enhancement weights must be non-negative")


class SpectrogramDecoder(Module):
    """Sub-pixel convolution from ``(N_a, d)`` tokens to ``(N_a * r, M)`` log-mel frames."""

    def __init__(self, d: int, mel_bins: int, upscale: int, rng: np.random.Generator,
                 kernel: int = 3, bias_init: float = 0.0):
        self.upscale = upscale
        self.mel_bins = mel_bins
        self.subpixel = SubPixelConv1d(d, mel_bins, upscale, rng, kernel=kernel)
        self.subpixel.conv.bias.data[:] = bias_init

    def __call__(self, z_a, n_frames: int | None = None) -> Tensor:
        z = z_a.tokens if isinstance(z_a, ModalitySequence) else z_a
        out = self.subpixel(z)
        if n_frames is None or n_frames == out.shape[0]:
            return out
        if n_frames < out.shape[0]:
            return out[:n_frames]
        return T.pad(out, [(0, n_frames - out.shape[0]), (0, 0)])


def spectrogram_decode(z_a, decoder: SpectrogramDecoder, n_frames: int | None = None) -> Tensor:
    return decoder(z_a, n_frames)


def _frames(x):
    return x.frames if isinstance(x, Spectrogram) else x


def recon_loss(x_hat, x_clean) -> Tensor:
    """Mean absolute difference between reconstructed and clean log-mel."""
    x_hat = T.as_tensor(_frames(x_hat))
    x_clean = T.as_tensor(_frames(x_clean))
    if x_hat.shape != x_clean.shape:
        raise ValueError(f"spectrogram shape mismatch: {x_hat.shape} vs {x_clean.shape}")
    return T.absolute(x_hat - x_clean).mean()


def perceptual_loss(x_hat, x_clean, frontend: AudioFrontend, target_features: Tensor | None = None) -> Tensor:
    """Mean squared distance between front-end features of x_hat and x_clean.

    The clean side is a constant target (no gradient into the front-end from it).
    """
    if target_features is None:
        with no_grad():
            target_features = frontend(_frames(x_clean)).tokens
    feats = frontend(_frames(x_hat) if isinstance(x_hat, Spectrogram) else x_hat).tokens
    target = T.as_tensor(target_features.data if isinstance(target_features, Tensor) else target_features)
    if feats.shape != target.shape:
        raise ValueError(f"feature shape mismatch: {feats.shape} vs {target.shape}")
    diff = feats - target
    return (diff * diff).mean()


def enhance_loss(recon, percep, w: EnhanceWeights) -> Tensor:
    return w.alpha_recon * T.as_tensor(recon) + w.alpha_percep * T.as_tensor(percep)
