"""
Bottleneck fusion: what crosses between modalities
==================================================

Audio and video branches never attend to each other directly.  Each branch
attends over its own tokens plus K shared bottleneck tokens, and the two
branch copies of the bottleneck are averaged before the next layer.
"""

import numpy as np

from avbc.fusion import AVBCEncoder, AVBCLayer, attention_cost, avbc_encode, avbc_layer
from avbc.nn import ConformerConfig, count_attention
from avbc.tensor import Tensor, no_grad

rng = np.random.default_rng(0)
cfg = ConformerConfig(d_model=32, heads=4, ffn_dim=64, conv_kernel=7, layers=1)

###############################################################################
# Inside one layer the audio output cannot see the video at all: perturbing
# the video leaves it bit-identical

layer = AVBCLayer(cfg, rng)
h_a, b = Tensor(rng.normal(size=(10, 32))), Tensor(rng.normal(size=(4, 32)))
h_v = rng.normal(size=(8, 32))
with no_grad():
    _, a1, b1 = avbc_layer(Tensor(h_v), h_a, b, layer)
    _, a2, b2 = avbc_layer(Tensor(h_v + 1e-3 * rng.normal(size=h_v.shape)), h_a, b, layer)
print("audio output unchanged:", a1.data.tobytes() == a2.data.tobytes())
print("bottleneck changed by", np.abs(b1.data - b2.data).max())

###############################################################################
# Across layers video reaches audio only through the averaged bottleneck;
# passing the audio copy forward instead severs the path entirely

enc = AVBCEncoder(cfg, 3, 4, rng)
with no_grad():
    _, alone = avbc_encode(None, h_a, enc, video_present=False)
    _, severed = avbc_encode(Tensor(h_v), h_a, enc, bottleneck_mode="audio")
    _, fused = avbc_encode(Tensor(h_v), h_a, enc)
print("severed == audio-only:", severed.tokens.data.tobytes() == alone.tokens.data.tobytes())
print("fused differs by", np.abs(fused.tokens.data - alone.tokens.data).max())

###############################################################################
# Attention cost per layer: (K+N_a)^2 + (K+N_v)^2 score entries instead of
# (N_a+N_v)^2 for direct joint attention.  The counter instruments the
# actual attention calls.

for k in (0, 1, 4, 16):
    enc = AVBCEncoder(ConformerConfig(d_model=8, heads=2, ffn_dim=16, conv_kernel=3, layers=1), 1, k, rng)
    with no_grad(), count_attention() as c:
        avbc_encode(Tensor(rng.normal(size=(100, 8))), Tensor(rng.normal(size=(100, 8))), enc)
    bott, direct = attention_cost(100, 100, k)
    print(f"K={k:2d}: measured {c.entries:6d}  formula {bott if k else direct:6d}  direct {direct}")
