"""
CTC against brute force, and beam search against exhaustive search
===================================================================

The CTC forward-backward recursion sums over every monotone alignment.  On
tiny problems the sum can be enumerated outright, which makes a good oracle.
"""

import itertools
import math

import numpy as np

from avbc.model import AVSRModel, ModelConfig
from avbc.recognition import beam_search, ctc_bruteforce, ctc_collapse, ctc_loss, greedy_decode
from avbc.tensor import Tensor, no_grad

rng = np.random.default_rng(0)

###############################################################################
# Four frames, three symbols (blank = 0), target [1, 2]

logits = rng.normal(size=(4, 3))
lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
paths = [p for p in itertools.product(range(3), repeat=4) if ctc_collapse(p) == [1, 2]]
print(len(paths), "alignments collapse to [1, 2]")
print("dynamic programme", float(ctc_loss(lp, [1, 2]).data))
print("enumeration      ", ctc_bruteforce(lp, [1, 2]))

###############################################################################
# The loss is differentiable in the log-probabilities

x = Tensor(lp, requires_grad=True)
ctc_loss(x, [1, 2]).backward()
print("gradient rows sum to", x.grad.sum(axis=1))

###############################################################################
# An untrained desk model still decodes deterministically.  Width-1 beam
# search is greedy decoding; a beam as wide as the vocabulary with
# max_len=2 is an exhaustive search over one-token outputs.

model = AVSRModel(ModelConfig.desk(), seed=3)
mem = Tensor(rng.normal(size=(6, 32)))
with no_grad():
    g = greedy_decode(mem, model.decoder, model.vocab, 10)
    b = beam_search(mem, model.decoder, model.vocab, 1, 10)
    wide = beam_search(mem, model.decoder, model.vocab, len(model.vocab), 2)
print("greedy", g.tokens, round(g.score, 6))
print("beam 1", b.tokens, round(b.score, 6))
print("exhaustive best", wide.tokens, "length-normalised score", round(wide.score, 6), math.isfinite(wide.score))
