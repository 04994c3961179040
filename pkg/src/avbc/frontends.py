"""Log-mel extraction plus the audio and video front-ends."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .nn import ConformerConfig, ConformerEncoder, ConvNd, Linear, Module
from .tensor import Tensor

SAMPLE_RATE = 16000
VIDEO_RATE = 25
MEL_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class LogMelConfig:
    sample_rate: int = SAMPLE_RATE
    window: float = 0.025
    hop: float = 0.010
    n_fft: int = 512
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0

    @property
    def win_length(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop * self.sample_rate))


@dataclass
class Spectrogram:
    frames: np.ndarray  # (T, M) log-mel
    hop: float = 0.010
    window: float = 0.025

    @property
    def mel_bins(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class VideoClip:
    frames: np.ndarray  # (T_v, H, W) grayscale in [0, 1]
    rate: int = VIDEO_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1] != self.frames.shape[2]:
            raise ValueError(f"video must be (T, H, H), got {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValueError("video pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class ModalitySequence:
    tokens: Tensor  # (N, d)
    modality: str = field(default="audio")

    MODALITIES = ("audio", "video", "fused-audio", "fused-video")

    def __post_init__(self):
        if self.modality not in self.MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    def __len__(self) -> int:
        return self.tokens.shape[0]


# ------------------------------------------------------------------ log-mel
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: LogMelConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    return pts[1:-1]


def mel_filterbank(cfg: LogMelConfig) -> np.ndarray:
    """Triangular HTK-spaced filters, shape ``(mel_bins, n_fft // 2 + 1)``."""
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.mel_bins + 2))
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, cfg: LogMelConfig) -> int:
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def compute_logmel(w: Waveform, cfg: LogMelConfig | None = None) -> Spectrogram:
    cfg = cfg or LogMelConfig()
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate} Hz")
    win = cfg.win_length
    if len(w) < win:
        raise ValueError(f"waveform of {len(w)} samples is shorter than one {win}-sample window")
    frames = sliding_window_view(w.samples, win)[:: cfg.hop_length]
    window = np.hanning(win + 1)[:-1]
    mag = np.abs(np.fft.rfft(frames * window, n=cfg.n_fft, axis=-1))
    mel = mag @ mel_filterbank(cfg).T
    return Spectrogram(np.log(mel + MEL_FLOOR), hop=cfg.hop, window=cfg.window)


# ---------------------------------------------------------------- front-ends
@dataclass(frozen=True)
class FrontendConfig:
    mel_bins: int = 80
    mel_mean: float = -4.0
    mel_std: float = 4.0
    video_mean: float = 0.25
    video_std: float = 0.25
    video_size: int = 16
    video_channels: int = 8
    video_stem_stride: int = 1
    video_res_blocks: int = 1


def subsampled_length(t: int) -> int:
    return -(-(-(-t // 2)) // 2)


class AudioFrontend(Module):
    """Two stride-2 1-D convolutions (4x temporal reduction) then a Conformer."""

    def __init__(self, fcfg: FrontendConfig, ccfg: ConformerConfig, rng: np.random.Generator):
        d = ccfg.d_model
        self.mel_mean = fcfg.mel_mean
        self.mel_std = fcfg.mel_std
        self.sub1 = ConvNd(fcfg.mel_bins, d, (3,), rng, stride=(2,), padding=(1,))
        self.sub2 = ConvNd(d, d, (3,), rng, stride=(2,), padding=(1,))
        self.encoder = ConformerEncoder(ccfg, rng)

    def __call__(self, x, rng: np.random.Generator | None = None) -> ModalitySequence:
        if isinstance(x, Spectrogram):
            x = x.frames
        x = (T.as_tensor(x) - self.mel_mean) * (1.0 / self.mel_std)
        h = T.silu(self.sub2(T.silu(self.sub1(x))))
        return ModalitySequence(self.encoder(h, rng=rng), "audio")


class ResidualBlock2d(Module):
    """Basic residual block applied per frame (temporal kernel 1)."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = ConvNd(channels, channels, (1, 3, 3), rng)
        self.conv2 = ConvNd(channels, channels, (1, 3, 3), rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.silu(x + self.conv2(T.silu(self.conv1(x))))


class VideoFrontend(Module):
    """3-D stem (5x7x7) → per-frame residual stack → spatial mean → Conformer."""

    def __init__(self, fcfg: FrontendConfig, ccfg: ConformerConfig, rng: np.random.Generator):
        c = fcfg.video_channels
        s = fcfg.video_stem_stride
        self.stem = ConvNd(1, c, (5, 7, 7), rng, stride=(1, s, s), padding=(2, 3, 3))
        self.res = [ResidualBlock2d(c, rng) for _ in range(fcfg.video_res_blocks)]
        self.proj = Linear(c, ccfg.d_model, rng)
        self.encoder = ConformerEncoder(ccfg, rng)
        self.video_mean = fcfg.video_mean
        self.video_std = fcfg.video_std

    def frame_embeddings(self, v) -> Tensor:
        frames = v.frames if isinstance(v, VideoClip) else np.asarray(v)
        x = T.as_tensor((frames[..., None] - self.video_mean) * (1.0 / self.video_std))
        x = T.silu(self.stem(x))
        for blk in self.res:
            x = blk(x)
        return self.proj(x.mean(axis=(1, 2)))

    def __call__(self, v, rng: np.random.Generator | None = None) -> ModalitySequence:
        return ModalitySequence(self.encoder(self.frame_embeddings(v), rng=rng), "video")


def audio_frontend(x: Spectrogram, module: AudioFrontend) -> ModalitySequence:
    return module(x)


def video_frontend(v: VideoClip, module: VideoFrontend) -> ModalitySequence:
    return module(v)
