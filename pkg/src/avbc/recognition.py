"""CTC and attention recognition heads, hybrid loss, decoding and WER."""
from __future__ import annotations

import itertools
import math
import string
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .frontends import ModalitySequence
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param, sinusoidal_encoding
from .tensor import Tensor, no_grad


class CTCInfeasibleError(ValueError):
    """Target cannot be emitted within the available frames (probability 0)."""


# ---------------------------------------------------------------- vocabulary
@dataclass
class Vocabulary:
    symbols: list[str] = field(default_factory=lambda: ["<blank>", *string.ascii_lowercase, " ", "'", "<sos/eos>"])
    blank_id: int = 0

    def __post_init__(self):
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if self.symbols[self.blank_id] != "<blank>":
            raise ValueError("blank must sit at blank_id")

    @property
    def sos_id(self) -> int:
        return len(self.symbols) - 1

    @property
    def eos_id(self) -> int:
        return len(self.symbols) - 1

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        special = {self.blank_id, self.sos_id, self.eos_id}
        return "".join(self.symbols[i] for i in ids if i not in special)


# ----------------------------------------------------------------------- CTC
def _extended(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.intp)
    ext[1::2] = target
    return ext


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_forward_backward(lp: np.ndarray, target: Sequence[int], blank: int):
    n_t = lp.shape[0]
    ext = _extended(target, blank)
    S = ext.size
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]  # (T, S)

    alpha = np.full((n_t, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_t):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_t, S), -np.inf)
    beta[-1, -1] = 0.0
    if S > 1:
        beta[-1, -2] = 0.0
    for t in range(n_t - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    log_p = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return ext, alpha, beta, log_p


def ctc_loss(log_probs, target: Sequence[int], blank: int = 0) -> Tensor:
    """-log p(target | log_probs) summed over all CTC alignments.

    ``log_probs`` is ``(T, V)`` and row-normalised in log space.
    """
    log_probs = T.as_tensor(log_probs)
    target = [int(t) for t in target]
    n_t = log_probs.shape[0]
    need = ctc_min_frames(target)
    if n_t < need:
        raise CTCInfeasibleError(f"target needs ≥{need} frames, got {n_t}")
    if any(t == blank for t in target):
        raise ValueError("target contains the blank symbol")
    lp = log_probs.data.astype(np.float64)
    ext, alpha, beta, log_p = _ctc_forward_backward(lp, target, blank)
    if not np.isfinite(log_p):
        raise CTCInfeasibleError("target has zero probability under log_probs")

    def bw(g):
        occ = np.exp(alpha + beta - log_p)  # (T, S) state occupancy
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occ)
        return ((-g * grad).astype(log_probs.dtype),)

    return T._make(np.asarray(-log_p, dtype=log_probs.dtype), (log_probs,), bw, "ctc_loss")


def ctc_collapse(path: Sequence[int], blank: int = 0) -> list[int]:
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def ctc_bruteforce(log_probs, target: Sequence[int], blank: int = 0, limit: int = 10**6) -> float:
    """Negative log-likelihood by enumerating every length-T label path."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    n_t, v = lp.shape
    if v ** n_t > limit:
        raise ValueError(f"{v}^{n_t} paths exceed the enumeration limit {limit}")
    target = [int(t) for t in target]
    total = 0.0
    for path in itertools.product(range(v), repeat=n_t):
        if ctc_collapse(path, blank) == target:
            total += math.exp(float(lp[np.arange(n_t), path].sum()))
    if total == 0.0:
        raise CTCInfeasibleError("no alignment collapses to the target")
    return -math.log(total)


def ctc_greedy(log_probs, blank: int = 0) -> list[int]:
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return ctc_collapse(lp.argmax(axis=-1).tolist(), blank)


class CTCProjection(Module):
    """One projection shared by every modality."""

    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator):
        self.proj = Linear(d, vocab_size, rng)

    def __call__(self, f) -> Tensor:
        f = f.tokens if isinstance(f, ModalitySequence) else f
        return T.log_softmax(self.proj(f), axis=-1)


def shared_ctc_projection(f, projection: CTCProjection) -> Tensor:
    return projection(f)


# ---------------------------------------------------------- attention decoder
@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    layers: int = 2


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.self_norm = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.cross_norm = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.ff = FeedForward(d, cfg.ffn_dim, rng)

    def __call__(self, x: Tensor, memory: Tensor, causal: np.ndarray) -> Tensor:
        h = self.self_norm(x)
        x = x + self.self_attn(h, h, h, mask=causal)
        x = x + self.cross_attn(self.cross_norm(x), memory)
        return x + self.ff(x)


class TransformerDecoder(Module):
    """Pre-norm Transformer decoder: causal self-attention + cross-attention on f_a."""

    def __init__(self, vocab_size: int, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embed = param(rng.normal(0.0, d ** -0.5, size=(vocab_size, d)))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)
        self.out = Linear(d, vocab_size, rng)

    def __call__(self, ys_in: np.ndarray, memory) -> Tensor:
        """Logits ``(..., t, V)`` for input ids ``(..., t)``."""
        memory = memory.tokens if isinstance(memory, ModalitySequence) else memory
        ys_in = np.asarray(ys_in, dtype=np.intp)
        t = ys_in.shape[-1]
        d = self.cfg.d_model
        x = self.embed[ys_in] * math.sqrt(d) + sinusoidal_encoding(t, d)
        causal = np.tril(np.ones((t, t), dtype=bool))
        for layer in self.layers:
            x = layer(x, memory, causal)
        return self.out(self.norm(x))


def decoder_attention_loss(f_a, y: Sequence[int], decoder: TransformerDecoder, vocab: Vocabulary) -> Tensor:
    """Teacher-forced mean per-token NLL of ``y + [eos]``."""
    y = list(y)
    if not y:
        raise ValueError("attention loss needs a non-empty target")
    ys_in = np.array([vocab.sos_id] + y)
    ys_out = np.array(y + [vocab.eos_id])
    logp = T.log_softmax(decoder(ys_in, f_a), axis=-1)
    return -logp[np.arange(len(ys_out)), ys_out].mean()


def hybrid_loss(l_ctc_a, l_ctc_v, l_att, lam: float):
    """λ·(L_ctc,a + L_ctc,v) + (1 − λ)·L_att; a missing video term counts as zero."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ctc = l_ctc_a if l_ctc_v is None else l_ctc_a + l_ctc_v
    return lam * ctc + (1.0 - lam) * l_att


@dataclass
class LossReport:
    l_ctc_a: float
    l_ctc_v: float
    l_att: float
    l_avsr: float
    l_recon: float
    l_percep: float
    l_enhance: float
    l_total: float

    def check(self, lam: float, alpha_recon: float, alpha_percep: float, rtol: float = 1e-9) -> None:
        avsr = lam * (self.l_ctc_a + self.l_ctc_v) + (1.0 - lam) * self.l_att
        enh = alpha_recon * self.l_recon + alpha_percep * self.l_percep
        for name, got, want in (("l_avsr", self.l_avsr, avsr), ("l_enhance", self.l_enhance, enh),
                                ("l_total", self.l_total, self.l_avsr + self.l_enhance)):
            if not math.isclose(got, want, rel_tol=rtol, abs_tol=1e-12):
                raise AssertionError(f"loss identity violated for {name}: {got} != {want}")


# ------------------------------------------------------------------ decoding
@dataclass
class Hypothesis:
    tokens: list[int]
    score: float  # length-normalised log-probability, ≤ 0
    log_prob: float = 0.0


def _step_logprobs(decoder: TransformerDecoder, prefixes: list[list[int]], memory) -> np.ndarray:
    with no_grad():
        logits = decoder(np.array(prefixes), memory)
        return T.log_softmax(logits[:, -1, :], axis=-1).data.astype(np.float64)


def _allowed(vocab: Vocabulary) -> np.ndarray:
    mask = np.ones(len(vocab), dtype=bool)
    mask[vocab.blank_id] = False
    return mask


def greedy_decode(f_a, decoder: TransformerDecoder, vocab: Vocabulary, max_len: int) -> Hypothesis:
    allowed = _allowed(vocab)
    toks: list[int] = []
    total = 0.0
    for step in range(max_len):
        lp = _step_logprobs(decoder, [[vocab.sos_id] + toks], f_a)[0]
        if step == max_len - 1:
            tok = vocab.eos_id
        else:
            tok = int(np.argmax(np.where(allowed, lp, -np.inf)))
        total += lp[tok]
        toks.append(tok)
        if tok == vocab.eos_id:
            break
    return Hypothesis(toks, total / len(toks), total)


def beam_search(f_a, decoder: TransformerDecoder, vocab: Vocabulary, width: int, max_len: int,
                rescore: Callable[[list[Hypothesis]], list[Hypothesis]] | None = None) -> Hypothesis:
    """Left-to-right beam search; final ranking by log-prob / length (eos included).

    ``max_len`` bounds the hypothesis length including eos; ties break on
    token ids. ``rescore`` is an optional hook over the finished list.
    """
    if width < 1:
        raise ValueError("beam width must be ≥ 1")
    allowed_ids = np.flatnonzero(_allowed(vocab))
    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(max_len):
        if not live:
            break
        lp = _step_logprobs(decoder, [[vocab.sos_id] + toks for toks, _ in live], f_a)
        cands = []
        for (toks, score), row in zip(live, lp):
            ids = [vocab.eos_id] if step == max_len - 1 else allowed_ids
            for tok in ids:
                cands.append((score + row[tok], toks + [int(tok)]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, toks in cands[:width]:
            if toks[-1] == vocab.eos_id:
                finished.append(Hypothesis(toks, score / len(toks), score))
            else:
                live.append((toks, score))
    if rescore is not None:
        finished = rescore(finished)
    finished.sort(key=lambda h: (-h.score, h.tokens))
    return finished[0]


# ----------------------------------------------------------------------- WER
def edit_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost alignment."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, dele


def wer(ref, hyp) -> float:
    ref = ref.split() if isinstance(ref, str) else list(ref)
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref:
        raise ValueError("reference must contain at least one word")
    return sum(edit_counts(ref, hyp)) / len(ref)
