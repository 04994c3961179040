import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avbc import tensor as T
from avbc.gradcheck import check_gradients
from avbc.recognition import (CTCInfeasibleError, CTCProjection, DecoderConfig, LossReport, TransformerDecoder,
                              Vocabulary, beam_search, ctc_bruteforce, ctc_collapse, ctc_loss,
                              decoder_attention_loss, edit_counts, greedy_decode, hybrid_loss,
                              shared_ctc_projection, wer)
from avbc.tensor import Tensor
from avbc.train import AdamW


def log_softmax_np(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def random_lp(rng, t, v):
    return log_softmax_np(rng.normal(scale=2.0, size=(t, v)))


# ----------------------------------------------------------------------- CTC
def test_ctc_single_frame():
    lp = np.log(np.array([[0.3, 0.7]]))
    assert float(ctc_loss(lp, [1]).data) == pytest.approx(-math.log(0.7), abs=1e-15)


def test_ctc_two_frames_hand_enumeration():
    p = np.array([[0.4, 0.6], [0.25, 0.75]])
    want = -math.log(p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1])
    assert float(ctc_loss(np.log(p), [1]).data) == pytest.approx(want, abs=1e-14)


def test_ctc_repeat_needs_blank(rng):
    lp = random_lp(rng, 5, 3)
    paths = [p for p in itertools.product(range(3), repeat=5) if ctc_collapse(p) == [1, 1]]
    want = -math.log(sum(math.exp(lp[np.arange(5), p].sum()) for p in paths))
    assert abs(float(ctc_loss(lp, [1, 1]).data) - want) < 1e-12
    assert all(0 in p for p in paths)


def test_ctc_matches_bruteforce_randomised():
    r = np.random.default_rng(2024)
    done = 0
    while done < 500:
        t, v = int(r.integers(1, 7)), int(r.integers(2, 5))
        y = [int(c) for c in r.integers(1, v, size=int(r.integers(0, 4)))]
        lp = random_lp(r, t, v)
        try:
            bf = ctc_bruteforce(lp, y)
        except CTCInfeasibleError:
            with pytest.raises(CTCInfeasibleError):
                ctc_loss(lp, y)
            continue
        assert abs(float(ctc_loss(lp, y).data) - bf) < 1e-9
        done += 1


@pytest.mark.parametrize("t,y", [(1, [1, 2]), (2, [1, 1]), (3, [1, 1, 2, 2])])
def test_ctc_infeasible_rejected(rng, t, y):
    lp = random_lp(rng, t, 3)
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(lp, y)
    with pytest.raises(CTCInfeasibleError):
        ctc_bruteforce(lp, y)


def test_ctc_empty_target_all_blank():
    lp = np.log(np.array([[1 - 1e-9, 1e-9]] * 4))
    assert float(ctc_loss(lp, []).data) == pytest.approx(0.0, abs=1e-8)


def test_bruteforce_refuses_large():
    with pytest.raises(ValueError, match="limit"):
        ctc_bruteforce(np.zeros((20, 4)), [1])


def test_ctc_gradcheck(rng):
    logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    rep = check_gradients(lambda: ctc_loss(T.log_softmax(logits, axis=-1), [1, 3, 3]), [logits], tol=1e-6)
    assert rep.passed, rep.summary()


# --------------------------------------------------------- shared projection
def test_shared_projection_bit_identical(rng):
    proj = CTCProjection(8, 6, rng)
    f = rng.normal(size=(5, 8))
    a = shared_ctc_projection(Tensor(f), proj).data
    v = shared_ctc_projection(Tensor(f.copy()), proj).data
    assert a.tobytes() == v.tobytes()
    np.testing.assert_allclose(np.exp(a).sum(axis=-1), 1.0, atol=1e-9)


def test_shared_projection_feeds_both_losses(rng):
    proj = CTCProjection(8, 6, rng)
    f_a, f_v = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(6, 8)))
    grads = []
    for f in (f_a, f_v):
        proj.zero_grad()
        ctc_loss(proj(f), [1, 2]).backward()
        grads.append(proj.proj.weight.grad.copy())
    assert all(np.abs(g).max() > 0 for g in grads)
    assert not np.allclose(grads[0], grads[1])


# ----------------------------------------------------------- attention loss
def small_decoder(rng, v=7, d=8):
    return TransformerDecoder(v, DecoderConfig(d_model=d, heads=2, ffn_dim=12, layers=1), rng)


def toy_vocab(v=7):
    return Vocabulary(["<blank>"] + list("abcdefghijklmnopqrstuvwxyz"[: v - 2]) + ["<sos/eos>"])


def test_attention_loss_uniform_is_log_v(rng):
    vocab = toy_vocab()
    dec = small_decoder(rng)
    dec.out.weight.data[:] = 0.0
    dec.out.bias.data[:] = 0.0
    loss = decoder_attention_loss(Tensor(rng.normal(size=(4, 8))), [2], dec, vocab)
    assert float(loss.data) == pytest.approx(math.log(7), abs=1e-12)


def test_attention_loss_rejects_empty(rng):
    with pytest.raises(ValueError):
        decoder_attention_loss(Tensor(np.zeros((3, 8))), [], small_decoder(rng), toy_vocab())


def test_decoder_is_causal(rng):
    dec = small_decoder(rng)
    mem = Tensor(rng.normal(size=(4, 8)))
    a = dec(np.array([6, 1, 2, 3]), mem).data
    b = dec(np.array([6, 1, 4, 5]), mem).data
    np.testing.assert_array_equal(a[:2], b[:2])


def test_attention_loss_gradcheck_desk(rng):
    vocab = Vocabulary()
    dec = TransformerDecoder(len(vocab), DecoderConfig(), rng)
    mem = Tensor(rng.normal(size=(8, 32)), requires_grad=True)
    names, params = zip(*dec.named_parameters())
    rep = check_gradients(lambda: decoder_attention_loss(mem, [3, 1, 20, 28], dec, vocab),
                          [mem, *params], names=["memory", *names], max_coords=4, tol=1e-4)
    assert rep.passed, rep.summary()


def test_overfit_one_sample_monotone_and_beam_recovers(rng):
    vocab = toy_vocab()
    dec = small_decoder(rng)
    mem = Tensor(rng.normal(size=(5, 8)))
    y = [1, 3, 2, 2]
    opt = AdamW(dec.parameters(), lr=3e-3, weight_decay=0.0)
    losses = []
    for _ in range(100):
        opt.zero_grad()
        loss = decoder_attention_loss(mem, y, dec, vocab)
        loss.backward()
        losses.append(float(loss.data))
        opt.step()
    assert all(b < a for a, b in zip(losses, losses[1:]))
    hyp = beam_search(mem, dec, vocab, width=4, max_len=8)
    assert hyp.tokens == y + [vocab.eos_id]


# ------------------------------------------------------------- hybrid loss
def test_hybrid_worked_example():
    assert hybrid_loss(2.0, 3.0, 1.0, 0.1) == pytest.approx(1.4, abs=1e-15)


def test_hybrid_endpoints():
    assert hybrid_loss(2.0, 3.0, 1.0, 0.0) == 1.0
    assert hybrid_loss(2.0, 3.0, 1.0, 1.0) == 5.0
    assert hybrid_loss(2.0, None, 1.0, 1.0) == 2.0
    with pytest.raises(ValueError):
        hybrid_loss(1.0, 1.0, 1.0, 1.5)


def test_loss_report_check():
    rep = LossReport(2.0, 3.0, 1.0, 1.4, 2.0, 3.0, 0.5, 1.9)
    rep.check(0.1, 0.1, 0.1)
    rep.l_total = 2.0
    with pytest.raises(AssertionError, match="l_total"):
        rep.check(0.1, 0.1, 0.1)


# ---------------------------------------------------------------- decoding
def seq_logprob(dec, vocab, mem, toks):
    ys_in = np.array([vocab.sos_id] + toks[:-1])
    lp = T.log_softmax(dec(ys_in, mem), axis=-1).data
    return float(lp[np.arange(len(toks)), toks].sum())


@pytest.mark.parametrize("seed", range(5))
def test_width_one_equals_greedy(seed):
    r = np.random.default_rng(seed)
    vocab = toy_vocab()
    dec = small_decoder(r)
    mem = Tensor(r.normal(size=(4, 8)))
    g = greedy_decode(mem, dec, vocab, max_len=6)
    b = beam_search(mem, dec, vocab, width=1, max_len=6)
    assert g.tokens == b.tokens and g.score == pytest.approx(b.score, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_equivalence_max_len_two(seed):
    r = np.random.default_rng(100 + seed)
    vocab = toy_vocab()
    dec = small_decoder(r)
    mem = Tensor(r.normal(size=(3, 8)))
    cands = [[vocab.eos_id]] + [[t, vocab.eos_id] for t in range(1, vocab.eos_id)]
    scored = sorted(((seq_logprob(dec, vocab, mem, c) / len(c), c) for c in cands), key=lambda s: (-s[0], s[1]))
    best = beam_search(mem, dec, vocab, width=len(vocab), max_len=2)
    assert best.tokens == scored[0][1]
    assert best.score == pytest.approx(scored[0][0], abs=1e-12)


def test_beam_hypothesis_contract(rng):
    vocab = toy_vocab()
    dec = small_decoder(rng)
    mem = Tensor(rng.normal(size=(4, 8)))
    h = beam_search(mem, dec, vocab, width=3, max_len=5)
    assert h.tokens[-1] == vocab.eos_id and len(h.tokens) <= 5
    assert vocab.blank_id not in h.tokens and h.score <= 0
    with pytest.raises(ValueError):
        beam_search(mem, dec, vocab, width=0, max_len=5)


def test_rescore_hook_can_reorder(rng):
    vocab = toy_vocab()
    dec = small_decoder(rng)
    mem = Tensor(rng.normal(size=(4, 8)))
    plain = beam_search(mem, dec, vocab, width=4, max_len=4)
    flipped = beam_search(mem, dec, vocab, width=4, max_len=4,
                          rescore=lambda hs: [type(h)(h.tokens, -h.score - 10, h.log_prob) for h in hs])
    assert flipped.tokens != plain.tokens


@pytest.mark.parametrize("seed", range(8))
def test_beam_score_monotone_in_width(seed):
    r = np.random.default_rng(500 + seed)
    vocab = toy_vocab()
    dec = small_decoder(r)
    mem = Tensor(r.normal(size=(4, 8)))
    scores = [beam_search(mem, dec, vocab, width=w, max_len=5).score for w in range(1, 7)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:])), scores


# --------------------------------------------------------------------- WER
@pytest.mark.parametrize("ref,hyp,want", [("a b c", "a b c", 0.0), ("a b c", "a x c", 1 / 3),
                                          ("a b", "a b c d", 1.0), ("a b c", "", 1.0)])
def test_wer_examples(ref, hyp, want):
    assert wer(ref, hyp) == pytest.approx(want)


def test_wer_empty_ref_rejected():
    with pytest.raises(ValueError):
        wer("", "a")


words = st.lists(st.sampled_from("abcd"), max_size=6)


@settings(max_examples=150, deadline=None)
@given(words, words)
def test_edit_counts_swap_symmetry(a, b):
    s, i, d = edit_counts(a, b)
    s2, i2, d2 = edit_counts(b, a)
    assert s + i + d == s2 + i2 + d2
    # a minimum alignment read backwards: insertions become deletions
    assert (i - d) == -(i2 - d2)


@settings(max_examples=150, deadline=None)
@given(words, words, words)
def test_edit_distance_triangle(a, b, c):
    dist = lambda x, y: sum(edit_counts(x, y))
    assert dist(a, c) <= dist(a, b) + dist(b, c)
    assert dist(a, a) == 0
