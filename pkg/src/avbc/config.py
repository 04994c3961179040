"""Run configuration and its ``key = value`` file format.

Example::

    # desk-scale run
    profile = desk
    seed = 3
    epochs = 30
    snr_grid = -7.5, -2.5, 2.5, 7.5, 12.5, 17.5

Keys are the :class:`RunConfig` field names; tuples are comma-separated.
``AVBC_SEED`` and ``AVBC_OUT`` override ``seed`` and ``out_dir``.
"""
from __future__ import annotations

import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, fields, replace

from .data import SNR_GRID
from .model import ModelConfig

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    corpus_seed: int = 1234
    n_train: int = 50
    n_test: int = 20
    epochs: int = 120
    batch_size: int = 1
    lr: float = 1e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    lam: float = 0.1
    alpha_recon: float = 0.1
    alpha_percep: float = 0.1
    dropout: float = 0.1
    n_tokens: int = 4
    avbc_layers: int = 2
    phase1_epochs: int = 40
    snr_grid: tuple[float, ...] = SNR_GRID
    clean_prob: float = 0.5
    enhance: bool = True
    beam_width: int = 40
    max_decode_len: int = 48
    train_wer_samples: int = 10
    keep_checkpoints: int = 10
    dtype: str = "float32"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {PROFILES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.n_tokens < 0:
            raise ValueError("n_tokens must be non-negative")

    def model_config(self) -> ModelConfig:
        make = ModelConfig.desk if self.profile == "desk" else ModelConfig.paper
        return make(n_tokens=self.n_tokens, avbc_layers=self.avbc_layers, lam=self.lam,
                    alpha_recon=self.alpha_recon, alpha_percep=self.alpha_percep, dropout=self.dropout)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _coerce(tp, raw: str):
    raw = raw.strip()
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typing.get_origin(tp) is tuple:
        (inner, *_) = typing.get_args(tp)
        return tuple(inner(p) for p in raw.split(",") if p.strip())
    return tp(raw)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    hints = typing.get_type_hints(RunConfig)
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(hints[key], raw)
    return replace(base or RunConfig(), **values)


def load_config(path=None, env: dict | None = None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = parse_config(fh.read(), cfg)
    env = os.environ if env is None else env
    if "AVBC_SEED" in env:
        cfg = replace(cfg, seed=int(env["AVBC_SEED"]))
    if "AVBC_OUT" in env:
        cfg = replace(cfg, out_dir=env["AVBC_OUT"])
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ", ".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"
