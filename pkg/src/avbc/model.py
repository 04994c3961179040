"""End-to-end noise-robust AVSR model: front-ends → AVBC → fusion → CTC/decoder, plus enhancement head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .enhancement import EnhanceWeights, SpectrogramDecoder, enhance_loss, perceptual_loss, recon_loss
from .frontends import AudioFrontend, FrontendConfig, VideoFrontend
from .fusion import AVBCEncoder, avbc_encode, fusion_encode
from .nn import ConformerConfig, ConformerEncoder, Module
from .recognition import (CTCProjection, DecoderConfig, LossReport, TransformerDecoder, Vocabulary,
                          ctc_loss, decoder_attention_loss, hybrid_loss)
from .tensor import Tensor, no_grad

UPSCALE = 4  # audio front-end temporal reduction


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    conv_kernel: int = 7
    enc_layers: int = 2
    avbc_layers: int = 2
    fusion_layers: int = 2
    n_tokens: int = 4
    dec_layers: int = 2
    dec_heads: int = 4
    dec_ffn: int = 64
    mel_bins: int = 80
    video_size: int = 16
    video_channels: int = 16
    video_stem_stride: int = 2
    video_res_blocks: int = 2
    dropout: float = 0.0
    lam: float = 0.1
    alpha_recon: float = 0.1
    alpha_percep: float = 0.1

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = cls(d_model=512, heads=4, ffn_dim=2048, conv_kernel=31, enc_layers=3, avbc_layers=3,
                   fusion_layers=3, dec_layers=6, dec_heads=4, dec_ffn=2048, video_size=96,
                   video_channels=64, video_stem_stride=2, video_res_blocks=8)
        return replace(base, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    def conformer(self, layers: int) -> ConformerConfig:
        return ConformerConfig(self.d_model, self.heads, self.ffn_dim, self.conv_kernel, layers, self.dropout)

    @property
    def weights(self) -> EnhanceWeights:
        return EnhanceWeights(self.alpha_recon, self.alpha_percep)


@dataclass
class Encoded:
    h_a: Tensor
    h_v: Tensor | None
    z_a: Tensor
    z_v: Tensor | None
    f_a: Tensor
    f_v: Tensor | None


class AVSRModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, vocab: Vocabulary | None = None):
        self.cfg = cfg
        self.vocab = vocab or Vocabulary()
        rng = np.random.default_rng(seed)
        fcfg = FrontendConfig(mel_bins=cfg.mel_bins, video_size=cfg.video_size,
                              video_channels=cfg.video_channels, video_stem_stride=cfg.video_stem_stride,
                              video_res_blocks=cfg.video_res_blocks)
        self.audio_fe = AudioFrontend(fcfg, cfg.conformer(cfg.enc_layers), rng)
        self.video_fe = VideoFrontend(fcfg, cfg.conformer(cfg.enc_layers), rng)
        self.avbc = AVBCEncoder(cfg.conformer(1), cfg.avbc_layers, cfg.n_tokens, rng)
        self.fusion = ConformerEncoder(cfg.conformer(cfg.fusion_layers), rng)
        self.ctc = CTCProjection(cfg.d_model, len(self.vocab), rng)
        self.decoder = TransformerDecoder(len(self.vocab),
                                          DecoderConfig(cfg.d_model, cfg.dec_heads, cfg.dec_ffn, cfg.dec_layers), rng)
        self.enhancer = SpectrogramDecoder(cfg.d_model, cfg.mel_bins, UPSCALE, rng,
                                           bias_init=self.audio_fe.mel_mean)

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        return {name: getattr(self, name).parameters()
                for name in ("audio_fe", "video_fe", "avbc", "fusion", "ctc", "decoder", "enhancer")}

    def encode(self, x_a: np.ndarray, video: np.ndarray | None, video_present: bool = True,
               bottleneck_mode: str = "average", rng: np.random.Generator | None = None) -> Encoded:
        video_present = video_present and video is not None
        h_a = self.audio_fe(x_a, rng).tokens
        h_v = self.video_fe(video, rng).tokens if video_present else None
        z_v, z_a = avbc_encode(h_v, h_a, self.avbc, video_present, bottleneck_mode, rng)
        f_a, f_v = fusion_encode(z_a, z_v, self.fusion, rng)
        return Encoded(h_a, h_v, z_a.tokens, z_v.tokens if z_v is not None else None,
                       f_a.tokens, f_v.tokens if f_v is not None else None)

    def losses(self, x_noisy: np.ndarray, x_clean: np.ndarray, video: np.ndarray | None, target: list[int],
               video_present: bool = True, enhance: bool = True,
               rng: np.random.Generator | None = None,
               percep_target: np.ndarray | None = None) -> tuple[Tensor, LossReport]:
        """Total training loss and its component report for one utterance.

        ``percep_target`` pins the (stop-gradient) perceptual target features;
        by default they are recomputed from ``x_clean`` with the live front-end.
        """
        cfg = self.cfg
        enc = self.encode(x_noisy, video, video_present, rng=rng)
        l_ctc_a = ctc_loss(self.ctc(enc.f_a), target, self.vocab.blank_id)
        l_ctc_v = ctc_loss(self.ctc(enc.f_v), target, self.vocab.blank_id) if enc.f_v is not None else None
        l_att = decoder_attention_loss(enc.f_a, target, self.decoder, self.vocab)
        l_avsr = hybrid_loss(l_ctc_a, l_ctc_v, l_att, cfg.lam)
        if enhance:
            x_hat = self.enhancer(enc.z_a, x_clean.shape[0])
            l_recon = recon_loss(x_hat, x_clean)
            l_percep = perceptual_loss(x_hat, x_clean, self.audio_fe, percep_target)
            l_enh = enhance_loss(l_recon, l_percep, cfg.weights)
            total = l_avsr + l_enh
            recon_v, percep_v, enh_v = float(l_recon.data), float(l_percep.data), float(l_enh.data)
        else:
            total = l_avsr
            recon_v = percep_v = enh_v = 0.0
        report = LossReport(
            l_ctc_a=float(l_ctc_a.data), l_ctc_v=float(l_ctc_v.data) if l_ctc_v is not None else 0.0,
            l_att=float(l_att.data), l_avsr=float(l_avsr.data), l_recon=recon_v, l_percep=percep_v,
            l_enhance=enh_v, l_total=float(total.data))
        return total, report

    def percep_target(self, x_clean: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.audio_fe(x_clean).tokens.data.copy()

    def reconstruct(self, x_noisy: np.ndarray, video: np.ndarray | None, video_present: bool = True) -> np.ndarray:
        with no_grad():
            enc = self.encode(x_noisy, video, video_present)
            return self.enhancer(enc.z_a, x_noisy.shape[0]).data


def loss_gradcheck(seed: int = 0, n_frames: int = 32, target: str = "abcd", max_coords: int | None = 4,
                   tol: float = 1e-4, h: float = 1e-5, cfg: ModelConfig | None = None):
    """Central-difference check of L_total over every parameter group, in float64.

    Desk shapes by default: d=32, K=4, T=32 mel frames (N_a=8), 8 video frames,
    |y|=4. ``max_coords`` samples that many coordinates per parameter tensor.
    The perceptual target is pinned, matching its stop-gradient in training.
    """
    from .gradcheck import check_gradients

    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        model = AVSRModel(cfg or ModelConfig.desk(), seed=seed)
        n_video = -(-(-(-n_frames // 2)) // 2)
        x_noisy = rng.normal(size=(n_frames, model.cfg.mel_bins)) - 4.0
        x_clean = rng.normal(size=(n_frames, model.cfg.mel_bins)) - 4.0
        video = rng.random((n_video, model.cfg.video_size, model.cfg.video_size))
        y = model.vocab.encode(target)
        pinned = model.percep_target(x_clean)
        names, params = zip(*model.named_parameters())
        report = check_gradients(
            lambda: model.losses(x_noisy, x_clean, video, y, percep_target=pinned)[0],
            list(params), h=h, tol=tol, max_coords=max_coords, names=list(names), seed=seed)
    return model, report
