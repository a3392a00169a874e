"""
Inside the bridge: projection, adapter, cross-attention, gate
=============================================================

A bridge layer reads frozen donor hidden states and blends them into a
receiver layer's stream. At zero init the gate path contributes nothing,
so the combined model starts out exactly equal to the receiver alone.
"""

import numpy as np

from xabr.bridge import BridgeConfig, BridgeLayer
from xabr.combined import CombinedModel
from xabr.tensor import Tensor, no_grad
from xabr.transformer import StackConfig, TransformerStack

donor = TransformerStack(StackConfig(n_layers=2, d_model=48, n_heads=4,
                                     d_ff=96, max_len=32, vocab_size=64),
                         seed=0)
receiver = TransformerStack(StackConfig(n_layers=2, d_model=24, n_heads=2,
                                        d_ff=48, max_len=16, vocab_size=64),
                            seed=1)
bcfg = BridgeConfig(placement=(0, 1), d_adapter=6, n_bridge_heads=2,
                    gate_bias_init=-2.0)
model = CombinedModel(donor, receiver, bcfg, vocab_out=64, seed=2)

ids = list(np.random.default_rng(3).integers(0, 64, size=12))

# transparency at init: the bridge readout is zeroed, so combined logits
# equal what the receiver produces on its own
with no_grad():
    combined_logits = model.forward(ids)
    receiver_logits = receiver.forward_logits(ids)
gap = np.abs(combined_logits.data - receiver_logits.data).max()
print(f"max |combined - receiver| at zero init: {gap:.2e}")

# wake the bridge up by hand and the logits move
bridge = model.bridges[0]
rng = np.random.default_rng(4)
for name in ("attn.wo", "adapter.up"):
    p = bridge.parameters()[name]
    p.data[:] = rng.normal(0.0, 0.3, size=p.data.shape)
with no_grad():
    woken = model.forward(ids)
print(f"after waking bridge 0:              {np.abs(woken.data - receiver_logits.data).max():.2e}")

# the gate squashes the readout: forcing it far negative restores
# near-transparency even with live weights
gate_b = bridge.parameters()["gate.b"]
gate_w = bridge.parameters()["gate.w"]
gate_w.data[:] = 0.0
gate_b.data[:] = -20.0
with no_grad():
    shut = model.forward(ids)
print(f"same weights, gate forced to -20:   {np.abs(shut.data - receiver_logits.data).max():.2e}")

# cross-attention bookkeeping: queries from the receiver's 12 positions,
# keys/values over all donor positions
print("bridge attention weights shape:", bridge.last_attn_shape,
      "(batch, heads, receiver positions, donor positions)")
