"""
Training and evaluating a tiny model end to end
===============================================

The same entry points the command verbs use: a key = value config, a training
run with per-epoch metrics and checkpoints, checkpoint averaging and a noisy
evaluation table.  Sizes here are tiny so the script finishes in about a minute.
"""

import tempfile
from pathlib import Path

from avbc.config import dump_config, parse_config
from avbc.train import Condition, average_checkpoints, run_eval, run_train

out = Path(tempfile.mkdtemp(prefix="avbc_demo_"))

###############################################################################
# A run configuration is a flat key = value file

cfg = parse_config(f"""
# tiny demo run
n_train = 6
n_test = 3
epochs = 4
phase1_epochs = 2
batch_size = 1
lr = 1e-3
max_decode_len = 12
train_wer_samples = 2
out_dir = {out}
""")
print(dump_config(cfg))

###############################################################################
# Train; every epoch appends a JSON line to metrics.jsonl and writes a checkpoint

result = run_train(cfg)
for row in result.history:
    print(f"epoch {row['epoch']} phase {row['phase']} enhance {row['enhance']!s:5s} "
          f"l_total {row['l_total']:.3f}  ctc_a {row['l_ctc_a']:.2f}  att {row['l_att']:.3f}")

###############################################################################
# Average the last checkpoints and evaluate clean and -5 dB babble, with and
# without video

avg = average_checkpoints(result.checkpoints[-2:])
conds = [Condition(None, None, True), Condition("babble", -5.0, True), Condition("babble", -5.0, False)]
report = run_eval(cfg, avg, conds, out_dir=out / "eval", width=2)
print((out / "eval" / "table.tsv").read_text())
print("outputs in", out)
