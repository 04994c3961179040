"""Command verbs: gen-corpus, train, eval, sweep-k, avg-ckpt, grad-check, bench-attn.

Run as ``python3 -m avbc <verb> ...``. Configuration comes from a
``key = value`` file (``--config``); ``AVBC_SEED`` / ``AVBC_OUT`` override it,
and explicit flags override both.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import dump_config, load_config
from .data import make_corpus, save_corpus
from .fusion import AVBCEncoder, attention_cost, avbc_encode
from .model import loss_gradcheck
from .nn import ConformerConfig, count_attention
from .tensor import Tensor
from .train import (Condition, average_checkpoints, default_conditions, dump_reconstructions, run_eval,
                    run_sweep, run_train, save_checkpoint, build_model)


def _cfg(args):
    return load_config(args.config, seed=getattr(args, "seed", None), out_dir=getattr(args, "out", None),
                       epochs=getattr(args, "epochs", None))


def cmd_gen_corpus(args) -> int:
    samples = make_corpus(args.n, args.seed, prefix=args.prefix)
    manifest = save_corpus(samples, args.out)
    print(f"wrote {len(samples)} samples to {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    t0 = time.time()
    res = run_train(cfg)
    last = res.history[-1]
    print(f"trained {cfg.epochs} epochs in {time.time() - t0:.0f}s; final l_total {last['l_total']:.4f} "
          f"train WER {last['train_wer']:.3f}; checkpoints in {out}")
    return 0


def _parse_conditions(spec: str | None) -> list[Condition]:
    if not spec:
        return default_conditions()
    conds = []
    for item in spec.split(","):
        # noise:snr[:novid]  e.g. babble:-5, clean, white:0:novid, overlap:-5
        parts = item.strip().split(":")
        video = not (len(parts) > 1 and parts[-1] == "novid")
        parts = [p for p in parts if p != "novid"]
        if parts[0] == "clean":
            conds.append(Condition(None, None, video))
        elif parts[0] == "overlap":
            conds.append(Condition("speech-overlap", float(parts[1]), video, True))
        else:
            conds.append(Condition(parts[0], float(parts[1]), video))
    return conds


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    ckpt = average_checkpoints(args.ckpt) if len(args.ckpt) > 1 else args.ckpt[0]
    out = Path(args.report or Path(cfg.out_dir) / "eval")
    report = run_eval(cfg, ckpt, _parse_conditions(args.conditions), out_dir=out, width=args.width)
    print((out / "table.tsv").read_text(), end="")
    print(f"average WER {100 * report['average']:.1f}")
    if args.dump_recon:
        paths = dump_reconstructions(cfg, ckpt, args.dump_recon)
        print(f"wrote {len(paths)} reconstructions to {args.dump_recon}")
    return 0


def cmd_sweep_k(args) -> int:
    cfg = _cfg(args)
    ks = [int(k) for k in args.k.split(",")]
    rows = run_sweep(cfg, ks, width=args.width)
    print((Path(cfg.out_dir) / "sweep.tsv").read_text(), end="")
    return 0 if len(rows) == len(ks) else 1


def cmd_avg_ckpt(args) -> int:
    paths = list(args.ckpt)
    if args.last:
        paths = paths[-args.last:]
    avg = average_checkpoints(paths)
    cfg = load_config(args.config)
    model = avg.apply(build_model(cfg))
    save_checkpoint(args.out, model, avg.epoch, avg.config_hash, avg.model_config)
    print(f"averaged {len(paths)} checkpoints → {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.time()
    _, rep = loss_gradcheck(seed=args.seed, max_coords=args.max_coords or None, tol=args.tol)
    print(rep.summary())
    print(f"elapsed {time.time() - t0:.1f}s")
    return 0 if rep.passed else 1


def cmd_bench_attn(args) -> int:
    rng = np.random.default_rng(args.seed)
    ccfg = ConformerConfig(d_model=args.d, heads=args.heads, ffn_dim=2 * args.d, conv_kernel=3, layers=1)
    print("N_a\tN_v\tK\tformula_bottleneck\tformula_direct\tmeasured\tms_per_layer")
    for k in [int(v) for v in args.k.split(",")]:
        enc = AVBCEncoder(ccfg, 1, k, rng)
        h_a = Tensor(rng.normal(size=(args.na, args.d)))
        h_v = Tensor(rng.normal(size=(args.nv, args.d)))
        with T.no_grad(), count_attention() as counter:
            t0 = time.perf_counter()
            avbc_encode(h_v, h_a, enc)
            ms = 1000 * (time.perf_counter() - t0)
        bott, direct = attention_cost(args.na, args.nv, k)
        print(f"{args.na}\t{args.nv}\t{k}\t{bott}\t{direct}\t{counter.entries}\t{ms:.1f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avbc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    g = sub.add_parser("gen-corpus", help="render a synthetic audio-visual corpus")
    g.add_argument("--n", type=int, default=50)
    g.add_argument("--seed", type=int, default=1234)
    g.add_argument("--out", required=True)
    g.add_argument("--prefix", default="utt")
    g.set_defaults(fn=cmd_gen_corpus)

    t = with_config(sub.add_parser("train", help="train with the two-phase curriculum"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(fn=cmd_train)

    e = with_config(sub.add_parser("eval", help="decode the test split under noise conditions"))
    e.add_argument("--ckpt", nargs="+", required=True, help="checkpoint(s); several are averaged")
    e.add_argument("--conditions", help="e.g. clean,babble:-5,babble:-5:novid,overlap:-5")
    e.add_argument("--width", type=int, help="beam width (default from config)")
    e.add_argument("--report", help="report directory (default <out>/eval)")
    e.add_argument("--dump-recon", metavar="DIR", help="also write reconstructed spectrograms")
    e.set_defaults(fn=cmd_eval)

    s = with_config(sub.add_parser("sweep-k", help="train/evaluate per bottleneck token count"))
    s.add_argument("--k", default="0,1,2,4,8,16")
    s.add_argument("--width", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_sweep_k)

    a = sub.add_parser("avg-ckpt", help="average checkpoints element-wise")
    a.add_argument("ckpt", nargs="+")
    a.add_argument("--last", type=int, help="only the last N of the given paths")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_avg_ckpt)

    c = sub.add_parser("grad-check", help="central-difference check of the full training loss")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-coords", type=int, default=4, help="coordinates per tensor (0 = all)")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(fn=cmd_grad_check)

    b = sub.add_parser("bench-attn", help="attention score-entry counts and timing per AVBC layer")
    b.add_argument("--na", type=int, default=100)
    b.add_argument("--nv", type=int, default=100)
    b.add_argument("--k", default="0,1,2,4,8,16")
    b.add_argument("--d", type=int, default=32)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=cmd_bench_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
