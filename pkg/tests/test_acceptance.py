"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run just this file with ``pytest tests/test_acceptance.py -v -s`` (the lines are
also repeated in the terminal summary), or directly with
``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from avbc import tensor as T
from avbc.config import RunConfig
from avbc.data import CLEAN, SNR_GRID, CurriculumConfig, NoiseSpec, curriculum_phase, draw_snr, mix_at_snr, synth_noise
from avbc.frontends import Waveform, compute_logmel
from avbc.fusion import AVBCEncoder, AVBCLayer, attention_cost, avbc_encode, avbc_layer
from avbc.model import AVSRModel, ModelConfig, loss_gradcheck
from avbc.nn import ConformerConfig, count_attention
from avbc.recognition import CTCInfeasibleError, beam_search, ctc_bruteforce, ctc_loss, greedy_decode
from avbc.tensor import Tensor, no_grad
from avbc.train import (Condition, average_checkpoints, corpora, evaluate, load_checkpoint, overfit_identity,
                        run_train, save_checkpoint)

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


def bitwise(a, b) -> bool:
    return a.data.tobytes() == b.data.tobytes()


def log_softmax_np(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------- 1
def test_01_gradient_integrity():
    t0 = time.time()
    _, rep = loss_gradcheck(seed=0, n_frames=32, target="abcd", max_coords=4, tol=1e-4)
    dt = time.time() - t0
    report(1, rep.passed and dt < 300, f"{rep.summary()}; {dt:.0f}s (< 300s)")


# ---------------------------------------------------------------------- 2
def test_02_ctc_oracle():
    r = np.random.default_rng(2)
    worst, done = 0.0, 0
    while done < 500:
        t, v = int(r.integers(1, 7)), int(r.integers(2, 5))
        y = [int(c) for c in r.integers(1, v, size=int(r.integers(0, 4)))]
        lp = log_softmax_np(r.normal(scale=2.0, size=(t, v)))
        try:
            bf = ctc_bruteforce(lp, y)
        except CTCInfeasibleError:
            continue
        worst = max(worst, abs(float(ctc_loss(lp, y).data) - bf))
        done += 1
    report(2, worst < 1e-9, f"500 instances, max |dp - enumeration| = {worst:.2e} (< 1e-9)")


# ---------------------------------------------------------------------- 3
def test_03_bottleneck_isolation():
    cfg = ConformerConfig()  # desk width
    r = np.random.default_rng(3)
    single = severed = 0
    for trial in range(50):
        na, nv, k = int(r.integers(2, 12)), int(r.integers(2, 12)), int(r.integers(1, 6))
        layer = AVBCLayer(cfg, r)
        h_a, b = Tensor(r.normal(size=(na, 32))), Tensor(r.normal(size=(k, 32)))
        h_v = r.normal(size=(nv, 32))
        _, a1, _ = avbc_layer(Tensor(h_v), h_a, b, layer)
        _, a2, _ = avbc_layer(Tensor(h_v + r.normal(size=h_v.shape)), h_a, b, layer)
        single += bitwise(a1, a2)
        enc = AVBCEncoder(cfg, int(r.integers(1, 4)), k, r)
        _, ref = avbc_encode(None, h_a, enc, video_present=False)
        _, za = avbc_encode(Tensor(h_v), h_a, enc, bottleneck_mode="audio")
        severed += bitwise(za.tokens, ref.tokens)
    report(3, single == 50 and severed == 50,
           f"single-layer invariance {single}/50, severed-pathway identity {severed}/50")


# ---------------------------------------------------------------------- 4
def test_04_complexity_accounting():
    cfg = ConformerConfig(d_model=8, heads=2, ffn_dim=16, conv_kernel=3, layers=1)
    r = np.random.default_rng(4)
    ok = 0
    for _ in range(10):
        na, nv, k = int(r.integers(1, 30)), int(r.integers(1, 30)), int(r.integers(0, 9))
        enc = AVBCEncoder(cfg, 1, k, r)
        with no_grad(), count_attention() as c:
            avbc_encode(Tensor(r.normal(size=(nv, 8))), Tensor(r.normal(size=(na, 8))), enc)
        want = (k + na) ** 2 + (k + nv) ** 2 if k else (na + nv) ** 2
        ok += c.entries == want
    enc4, enc0 = AVBCEncoder(cfg, 1, 4, r), AVBCEncoder(cfg, 1, 0, r)
    counts = []
    for enc in (enc4, enc0):
        with no_grad(), count_attention() as c:
            avbc_encode(Tensor(r.normal(size=(100, 8))), Tensor(r.normal(size=(100, 8))), enc)
        counts.append(c.entries)
    worked = counts == [21632, 40000] and attention_cost(100, 100, 4) == (21632, 40000)
    report(4, ok == 10 and worked, f"{ok}/10 random triples; N=100,K=4 → {counts[0]} vs {counts[1]}")


# ---------------------------------------------------------------------- 5
def test_05_snr_exactness():
    r = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        target = float(r.uniform(-7.5, 17.5))
        clean = Waveform(r.normal(size=4000) * r.uniform(0.01, 3))
        noise = synth_noise(NoiseSpec(("white", "pink", "babble")[i % 3], int(r.integers(2**31))), 4000)
        mix, scaled = mix_at_snr(clean, noise, target, return_noise=True)
        c, n = clean.samples, scaled.samples
        got = 10 * math.log10(math.fsum(c * c) / math.fsum(n * n))  # independent of the library's power helper
        worst = max(worst, abs(got - target))
        assert np.array_equal(mix.samples, c + n)
    report(5, worst < 0.01, f"100 cases in [-7.5, 17.5] dB, max error {worst:.2e} dB (< 0.01)")


# ---------------------------------------------------------------------- 6
def test_06_overfit_soundness():
    steps_budget = 300
    cfg = RunConfig(n_train=10, batch_size=2, epochs=steps_budget * 2 // 10, lr=3e-3, clean_prob=1.0,
                    phase1_epochs=10**6, train_wer_samples=10, corpus_seed=77)
    train, _ = corpora(cfg)
    hist = run_train(cfg, train, save=False).history
    hit = next((row["step"] for row in hist if row["train_wer"] == 0.0), None)
    asr_ok = hit is not None and hit <= steps_budget
    trace, final = overfit_identity(n=10, steps=200)
    enh_ok = final < 0.05
    report(6, asr_ok and enh_ok,
           f"greedy WER 0 reached at step {hit} (≤ {steps_budget}; final {hist[-1]['train_wer']:.3f}); "
           f"identity recon after 200 steps {final:.3f} (< 0.05)")


# ---------------------------------------------------------------------- 7
TREND_SEEDS = (0, 1, 2)
TREND_WIDTH = 4


def trend_run(seed: int, enhance: bool) -> dict:
    cfg = RunConfig(seed=seed, enhance=enhance)
    train, test = corpora(cfg)
    t0 = time.time()
    model = run_train(cfg, train, save=False).model
    conds = [Condition("babble", -5.0, True), Condition("babble", -5.0, False)]
    per_cond, _ = evaluate(model, test, conds, TREND_WIDTH, cfg.max_decode_len, seed=cfg.corpus_seed)
    return {"vid": per_cond[conds[0].name], "novid": per_cond[conds[1].name], "seconds": time.time() - t0}


@pytest.mark.slow
def test_07_noise_robustness_trend():
    full = [trend_run(s, True) for s in TREND_SEEDS]
    ablate = [trend_run(s, False) for s in TREND_SEEDS]
    m_full = float(np.mean([r["vid"] for r in full]))
    m_noenh = float(np.mean([r["vid"] for r in ablate]))
    m_audio = float(np.mean([r["novid"] for r in full]))
    slowest = max(r["seconds"] for r in full + ablate)
    ok = m_full < m_noenh < m_audio and m_full < m_audio and slowest < 1800
    report(7, ok, f"-5 dB babble mean WER over seeds {TREND_SEEDS}: full {100 * m_full:.1f}, "
                  f"no-enh {100 * m_noenh:.1f}, audio-only {100 * m_audio:.1f}; slowest run {slowest:.0f}s")


# ---------------------------------------------------------------------- 8
def test_08_curriculum_contract():
    cur = CurriculumConfig(phase1_epochs=10)
    p1, p2 = curriculum_phase(9, cur), curriculum_phase(10, cur)
    bounds = (p1.index, p2.index, p1.enhance_enabled, p2.enhance_enabled) == (1, 2, False, True)
    sets = set(p1.noisy_choices) == {17.5, 12.5, 7.5} and set(p2.noisy_choices) == set(SNR_GRID)
    grid = sorted(SNR_GRID) == [-7.5, -2.5, 2.5, 7.5, 12.5, 17.5]
    sets = sets and CLEAN in p1.snr_choices and CLEAN in p2.snr_choices
    r = np.random.default_rng(8)
    fracs = []
    for ph in (p1, p2):
        draws = [draw_snr(ph, r) for _ in range(10_000)]
        fracs.append(sum(d is CLEAN for d in draws) / 1e4)
        assert {d for d in draws if d is not CLEAN} <= set(ph.noisy_choices)
    frac_ok = all(abs(f - 0.5) <= 0.02 for f in fracs)
    report(8, bounds and sets and grid and frac_ok,
           f"boundary at epoch 10, phase sets {p1.noisy_choices} / {p2.noisy_choices}, "
           f"clean fractions {fracs[0]:.4f}, {fracs[1]:.4f} (0.5 ± 0.02)")


# ---------------------------------------------------------------------- 9
def test_09_determinism_and_checkpoints(tmp_path):
    tiny = dict(n_train=3, n_test=2, epochs=2, batch_size=2, phase1_epochs=1, train_wer_samples=1,
                max_decode_len=6, dtype="float64")
    a = run_train(RunConfig(out_dir=str(tmp_path / "a"), **tiny))
    b = run_train(RunConfig(out_dir=str(tmp_path / "b"), **tiny))
    same_metrics = (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()

    r = np.random.default_rng(9)
    x = r.normal(size=(24, 80)) - 4
    video = r.random((6, 16, 16))
    with no_grad():
        ref = a.model.encode(x, video).f_a.data
    model = AVSRModel(ModelConfig.desk(), seed=123)
    load_checkpoint(a.checkpoints[-1]).apply(model)
    with no_grad():
        round_trip = model.encode(x, video).f_a.data.tobytes() == ref.tobytes()

    paths, consts = [], np.arange(10.0)
    m = AVSRModel(ModelConfig.desk(), seed=0)
    for i, c in enumerate(consts):
        for p in m.parameters():
            p.data[:] = c
        paths.append(save_checkpoint(tmp_path / f"c{i}.npz", m, i, "h", m.cfg.to_dict()))
    avg = average_checkpoints(paths)
    avg_ok = all(np.allclose(v, consts.mean(), rtol=0, atol=1e-12) for v in avg.params.values())
    report(9, same_metrics and round_trip and avg_ok,
           f"equal-seed metrics identical {same_metrics}; round-trip bit-identical {round_trip}; "
           f"10-checkpoint average exact {avg_ok}")


# --------------------------------------------------------------------- 10
def test_10_beam_search_sanity():
    cfg = RunConfig()
    _, test = corpora(cfg)
    model = AVSRModel(ModelConfig.desk(), seed=10)
    agree = 0
    with no_grad():
        for s in test:
            f_a = model.encode(compute_logmel(s.clean).frames, s.video.frames).f_a
            g = greedy_decode(f_a, model.decoder, model.vocab, 12)
            b = beam_search(f_a, model.decoder, model.vocab, 1, 12)
            agree += g.tokens == b.tokens and math.isclose(g.score, b.score, rel_tol=0, abs_tol=1e-12)
    exhaustive = 0
    r = np.random.default_rng(10)
    vocab = model.vocab
    for _ in range(5):
        mem = Tensor(r.normal(size=(int(r.integers(2, 6)), 32)))
        dec = AVSRModel(ModelConfig.desk(), seed=int(r.integers(2**31))).decoder
        cands = [[vocab.eos_id]] + [[t, vocab.eos_id] for t in range(1, vocab.eos_id)]
        scores = []
        with no_grad():
            for c in cands:
                lp = T.log_softmax(dec(np.array([vocab.sos_id] + c[:-1]), mem), axis=-1).data
                scores.append((float(lp[np.arange(len(c)), c].sum()) / len(c), c))
        best = sorted(scores, key=lambda s: (-s[0], s[1]))[0]
        with no_grad():
            hyp = beam_search(mem, dec, vocab, len(vocab), 2)
        exhaustive += hyp.tokens == best[1] and math.isclose(hyp.score, best[0], rel_tol=0, abs_tol=1e-12)
    report(10, agree == len(test) and exhaustive == 5,
           f"width-1 == greedy on {agree}/{len(test)} test utterances; exhaustive max_len=2 {exhaustive}/5")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", *sys.argv[1:]]))
