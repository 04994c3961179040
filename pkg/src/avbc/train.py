"""Optimiser, schedule, checkpoints and the train / eval / sweep drivers."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import (CLEAN, NOISE_KINDS, CorpusConfig, CurriculumConfig, NoiseSpec, Sample, curriculum_phase,
                   derive_seed, draw_noise_kind, draw_snr, make_corpus, mix_at_snr, overlap_speech, synth_noise)
from .frontends import compute_logmel
from .fusion import attention_cost
from .io import append_jsonl, write_container, write_jsonl
from .model import AVSRModel, ModelConfig
from .nn import Module
from .recognition import beam_search, greedy_decode, wer
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ optimiser
class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.98), eps: float = 1e-9,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.m = [np.array(a, dtype=p.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.dtype) for a, p in zip(state["v"], self.params)]


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_at(step: int, total: int, peak: float, warmup: int) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step <= 0:
        return 0.0
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / max(1, total - warmup)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int
    config_hash: str
    model_config: dict
    optimizer: dict | None = None

    def apply(self, model: Module) -> Module:
        model.load_state_dict(self.params)
        return model


def save_checkpoint(path, model: Module, epoch: int, config_hash: str, model_config: dict,
                    optimizer: AdamW | None = None) -> Path:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    meta = {"epoch": epoch, "config_hash": config_hash, "model_config": model_config}
    if optimizer is not None:
        names = [k for k, _ in model.named_parameters()]
        st = optimizer.state()
        meta["opt_step"] = st["step"]
        for n, m, v in zip(names, st["m"], st["v"]):
            arrays[f"m/{n}"] = m
            arrays[f"v/{n}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        params = {k[6:]: z[k] for k in z.files if k.startswith("param/")}
        opt = None
        if "opt_step" in meta:
            names = list(params)
            opt = {"step": meta["opt_step"], "m": [z[f"m/{n}"] for n in names], "v": [z[f"v/{n}"] for n in names]}
    return Checkpoint(params, meta["epoch"], meta["config_hash"], meta["model_config"], opt)


def average_checkpoints(paths: Sequence) -> Checkpoint:
    """Element-wise mean of parameters; optimiser state is dropped."""
    if not paths:
        raise ValueError("need at least one checkpoint")
    cks = [p if isinstance(p, Checkpoint) else load_checkpoint(p) for p in paths]
    first = cks[0]
    for ck in cks[1:]:
        if ck.params.keys() != first.params.keys():
            raise ValueError("checkpoints hold different parameter sets")
        for k, v in ck.params.items():
            if v.shape != first.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {first.params[k].shape}")
    avg = {}
    for k in first.params:
        acc = np.zeros(first.params[k].shape, dtype=np.float64)
        for ck in cks:
            acc += ck.params[k]
        avg[k] = (acc / len(cks)).astype(first.params[k].dtype)
    return Checkpoint(avg, max(ck.epoch for ck in cks), first.config_hash, first.model_config, None)


# --------------------------------------------------------------------- data
def corpora(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    ccfg = CorpusConfig(video_size=cfg.model_config().video_size)
    train = make_corpus(cfg.n_train, cfg.corpus_seed, ccfg, prefix="train")
    test = make_corpus(cfg.n_test, cfg.corpus_seed + 1, ccfg, prefix="test")
    return train, test


def noisy_input(sample: Sample, snr, kind: str, noise_seed: int, pool: Sequence[Sample]) -> np.ndarray:
    """Log-mel of the sample mixed with ``kind`` noise at ``snr`` (CLEAN → unmixed)."""
    if snr is CLEAN:
        return compute_logmel(sample.clean).frames
    if kind == "speech-overlap":
        others = [s for s in pool if s.id != sample.id]
        distractor = others[noise_seed % len(others)]
        return compute_logmel(overlap_speech(sample, distractor, snr).waveform).frames
    noise = synth_noise(NoiseSpec(kind, noise_seed), len(sample.clean))
    return compute_logmel(mix_at_snr(sample.clean, noise, snr)).frames


def _dtype(cfg: RunConfig):
    return np.float32 if cfg.dtype == "float32" else np.float64


def build_model(cfg: RunConfig) -> AVSRModel:
    with T.default_dtype(_dtype(cfg)):
        return AVSRModel(cfg.model_config(), seed=cfg.seed)


# -------------------------------------------------------------------- train
@dataclass
class TrainResult:
    model: AVSRModel
    history: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def greedy_wer(model: AVSRModel, samples: Sequence[Sample], max_len: int) -> float:
    errs = words = 0
    for s in samples:
        hyp = transcribe(model, compute_logmel(s.clean).frames, s.video.frames, True, width=1, max_len=max_len)
        errs += wer(s.transcript, hyp.split()) * len(s.transcript)
        words += len(s.transcript)
    return errs / max(words, 1)


def transcribe(model: AVSRModel, x: np.ndarray, video: np.ndarray | None, video_present: bool,
               width: int, max_len: int) -> str:
    with no_grad():
        enc = model.encode(x, video, video_present)
        if width == 1:
            hyp = greedy_decode(enc.f_a, model.decoder, model.vocab, max_len)
        else:
            hyp = beam_search(enc.f_a, model.decoder, model.vocab, width, max_len)
    return model.vocab.decode(hyp.tokens)


def run_train(cfg: RunConfig, train: Sequence[Sample] | None = None, out_dir=None,
              save: bool = True) -> TrainResult:
    """Train with the two-phase curriculum; one metrics line (and checkpoint) per epoch."""
    dtype = _dtype(cfg)
    if train is None:
        train, _ = corpora(cfg)
    out = Path(out_dir or cfg.out_dir)
    if save:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        metrics_path.write_text("")
    model = build_model(cfg)
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_frac * total))
    cur = CurriculumConfig(cfg.phase1_epochs, tuple(cfg.snr_grid), clean_prob=cfg.clean_prob)
    rtol = 1e-5 if dtype == np.float32 else 1e-9
    history, ckpts = [], []
    step = 0
    with T.default_dtype(dtype):
        for epoch in range(cfg.epochs):
            phase = curriculum_phase(epoch, cur)
            enhance = cfg.enhance and phase.enhance_enabled
            order = np.random.default_rng(derive_seed(cfg.seed, epoch, 0xE)).permutation(len(train))
            sums: Counter = Counter()
            snr_hist: Counter = Counter()
            for b0 in range(0, len(order), cfg.batch_size):
                batch = order[b0:b0 + cfg.batch_size]
                opt.zero_grad()
                for idx in batch:
                    sample = train[idx]
                    rng = np.random.default_rng(derive_seed(cfg.seed, epoch, int(idx)))
                    snr = draw_snr(phase, rng, cfg.clean_prob)
                    kind = draw_noise_kind(rng)
                    snr_hist["clean" if snr is CLEAN else f"{snr:g}"] += 1
                    x_noisy = noisy_input(sample, snr, kind, int(rng.integers(2**31)), train).astype(dtype)
                    x_clean = compute_logmel(sample.clean).frames.astype(dtype)
                    target = model.vocab.encode(sample.text)
                    try:
                        loss, rep = model.losses(x_noisy, x_clean, sample.video.frames.astype(dtype), target,
                                                 enhance=enhance, rng=rng)
                        (loss * (1.0 / len(batch))).backward()
                    except NonFiniteError as exc:
                        raise TrainingDiverged(f"epoch {epoch} step {step} sample {sample.id}: "
                                               f"non-finite value from op '{exc.op}' ({exc.where})") from exc
                    rep.check(cfg.lam, cfg.alpha_recon, cfg.alpha_percep, rtol=rtol)
                    for k, v in vars(rep).items():
                        sums[k] += v
                step += 1
                clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr_at(step, total, cfg.lr, warmup))
            n = len(order)
            row = {k: sums[k] / n for k in ("l_total", "l_avsr", "l_enhance", "l_ctc_a", "l_ctc_v", "l_att",
                                               "l_recon", "l_percep")}
            row.update(epoch=epoch, phase=phase.index, enhance=enhance, step=step,
                       snr_histogram=dict(sorted(snr_hist.items())))
            row["train_wer"] = greedy_wer(model, train[: cfg.train_wer_samples], cfg.max_decode_len)
            history.append(row)
            log.info("epoch %d phase %d l_total %.4f train_wer %.3f", epoch, phase.index, row["l_total"],
                     row["train_wer"])
            if save:
                append_jsonl(metrics_path, row)
                ck = save_checkpoint(out / f"ckpt_epoch{epoch:03d}.npz", model, epoch, cfg.digest(),
                                     model.cfg.to_dict(), opt)
                ckpts.append(ck)
                while len(ckpts) > cfg.keep_checkpoints:
                    ckpts.pop(0).unlink()
    return TrainResult(model, history, ckpts)


# --------------------------------------------------------------------- eval
@dataclass(frozen=True)
class Condition:
    noise: str | None  # None → clean
    snr: float | None
    video: bool = True
    overlap: bool = False

    @property
    def name(self) -> str:
        base = "clean" if self.snr is None else f"{'overlap' if self.overlap else self.noise}{self.snr:g}dB"
        return f"{base}/{'vid' if self.video else 'novid'}"


TABLE_SNRS = (None, 15.0, 10.0, 5.0, 0.0, -5.0)


def default_conditions(noise: str = "babble") -> list[Condition]:
    conds = [Condition(None if s is None else noise, s, True) for s in TABLE_SNRS]
    conds += [Condition(None, None, False), Condition(noise, -5.0, False),
              Condition("speech-overlap", -5.0, True, True), Condition("speech-overlap", -5.0, False, True)]
    return conds


def evaluate(model: AVSRModel, test: Sequence[Sample], conditions: Sequence[Condition], width: int,
             max_len: int, seed: int = 0) -> tuple[dict, list[dict]]:
    """WER per condition (pooled over words) and per-utterance decode rows."""
    dtype = model.parameters()[0].dtype
    rows, per_cond = [], {}
    for cond in conditions:
        errs = words = 0
        for i, s in enumerate(test):
            kind = "speech-overlap" if cond.overlap else (cond.noise or NOISE_KINDS[0])
            snr = CLEAN if cond.snr is None else cond.snr
            nseed = derive_seed(seed, i, NOISE_KINDS.index(kind), int(round((cond.snr or 0) * 10)) + 1000)
            x = noisy_input(s, snr, kind, nseed, test).astype(dtype)
            hyp = transcribe(model, x, s.video.frames.astype(dtype), cond.video, width, max_len)
            w = wer(s.transcript, hyp.split())
            errs += w * len(s.transcript)
            words += len(s.transcript)
            rows.append({"id": s.id, "ref": s.text, "hyp": hyp, "wer": w, "snr": cond.snr,
                         "condition": cond.name})
        per_cond[cond.name] = errs / words
    return per_cond, rows


def _snr_label(snr) -> str:
    return "clean" if snr is None else f"{snr:g}"


def format_table(per_cond: dict, conditions: Sequence[Condition] | None = None) -> str:
    """TSV grid: one row per (noise, video) setting, one column per SNR (clean, 15, …, −5).

    Without ``conditions`` the table is a flat condition/WER list.
    """
    if conditions is None:
        return "\n".join(["condition\twer", *(f"{k}\t{100 * v:.1f}" for k, v in per_cond.items())]) + "\n"
    snrs = list(TABLE_SNRS) + sorted({c.snr for c in conditions if c.snr not in TABLE_SNRS}, reverse=True)
    settings: dict[tuple, dict] = {}
    for c in conditions:
        if c.snr is not None:
            key = ("overlap" if c.overlap else c.noise, c.video)
            settings.setdefault(key, {})[c.snr] = per_cond[c.name]
    for c in conditions:  # the clean column is shared by every noise row with the same video flag
        if c.snr is None:
            rows = [cells for (_, video), cells in settings.items() if video == c.video]
            for cells in rows or [settings.setdefault(("clean", c.video), {})]:
                cells[None] = per_cond[c.name]
    lines = ["setting\t" + "\t".join(_snr_label(s) for s in snrs)]
    for (noise, video), cells in settings.items():
        row = [f"{noise}/{'vid' if video else 'novid'}"]
        row += [f"{100 * cells[s]:.1f}" if s in cells else "-" for s in snrs]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def run_eval(cfg: RunConfig, checkpoint, conditions: Sequence[Condition] | None = None,
             test: Sequence[Sample] | None = None, out_dir=None, width: int | None = None) -> dict:
    conditions = list(conditions or default_conditions())
    model = build_model(cfg)
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    ck.apply(model)
    if test is None:
        _, test = corpora(cfg)
    per_cond, rows = evaluate(model, test, conditions, width or cfg.beam_width, cfg.max_decode_len,
                              seed=cfg.corpus_seed)
    report = {"conditions": per_cond, "average": float(np.mean(list(per_cond.values())))}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "decodes.jsonl", rows)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out / "table.tsv").write_text(format_table(per_cond, conditions))
    return report


def dump_reconstructions(cfg: RunConfig, checkpoint, out_dir, snr: float = -5.0, noise: str = "babble",
                         test: Sequence[Sample] | None = None) -> list[Path]:
    model = build_model(cfg)
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    ck.apply(model)
    if test is None:
        _, test = corpora(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(test):
        x = noisy_input(s, snr, noise, derive_seed(cfg.corpus_seed, i, 99), test)
        rec = model.reconstruct(x.astype(model.parameters()[0].dtype), s.video.frames)
        p = out / f"{s.id}.recon.avbc"
        write_container(p, {"noisy": x, "recon": rec, "clean": compute_logmel(s.clean).frames})
        paths.append(p)
    return paths


# -------------------------------------------------------------------- sweep
def run_sweep(cfg: RunConfig, k_values: Sequence[int], condition: Condition | None = None,
              width: int | None = None) -> list[dict]:
    """Train and evaluate one model per bottleneck token count."""
    if any(k < 0 for k in k_values):
        raise ValueError("token counts must be non-negative")
    condition = condition or Condition("babble", -5.0, True)
    train, test = corpora(cfg)
    n_a = int(round(np.mean([len(s.video) for s in test])))
    rows = []
    for k in k_values:
        kcfg = cfg.replace(n_tokens=int(k), out_dir=str(Path(cfg.out_dir) / f"k{k}"))
        result = run_train(kcfg, train)
        per_cond, _ = evaluate(result.model, test, [condition], width or kcfg.beam_width,
                               kcfg.max_decode_len, seed=cfg.corpus_seed)
        bottleneck, direct = attention_cost(n_a, n_a, int(k))
        rows.append({"K": int(k), "wer": per_cond[condition.name], "cost_bottleneck": bottleneck,
                     "cost_direct": direct, "N_a": n_a, "N_v": n_a})
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "sweep.jsonl", rows)
    lines = ["K\twer\tcost_bottleneck\tcost_direct"] + [
        f"{r['K']}\t{100 * r['wer']:.1f}\t{r['cost_bottleneck']}\t{r['cost_direct']}" for r in rows]
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n")
    return rows


# ------------------------------------------------------------------ overfit
def overfit_identity(n: int = 10, steps: int = 200, lr: float = 3e-3, batch_size: int = 10, seed: int = 0,
                     corpus_seed: int = 77, dtype=np.float32) -> tuple[list[float], float]:
    """Clean log-mel in, same log-mel out: fit front-end → AVBC → decoder on ``n`` samples.

    Returns the per-step mean batch recon loss and the final mean recon over the corpus.
    """
    from .enhancement import recon_loss
    samples = make_corpus(n, corpus_seed, CorpusConfig(), prefix="ident")
    with T.default_dtype(dtype):
        model = AVSRModel(ModelConfig.desk(), seed=seed)
        xs = [compute_logmel(s.clean).frames.astype(dtype) for s in samples]
        vs = [s.video.frames.astype(dtype) for s in samples]
        params = model.audio_fe.parameters() + model.avbc.parameters() + model.enhancer.parameters()
        opt = AdamW(params, lr=lr, weight_decay=0.0)
        trace = []
        for step in range(steps):
            opt.zero_grad()
            total = 0.0
            for j in range(batch_size):
                i = (step * batch_size + j) % n
                x_hat = model.enhancer(model.encode(xs[i], vs[i]).z_a, len(xs[i]))
                loss = recon_loss(x_hat, xs[i])
                (loss * (1.0 / batch_size)).backward()
                total += float(loss.data)
            clip_grad_norm(params, 5.0)
            opt.step()
            trace.append(total / batch_size)
        with no_grad():
            final = float(np.mean([float(recon_loss(model.reconstruct(x, v), x).data) for x, v in zip(xs, vs)]))
    return trace, final
