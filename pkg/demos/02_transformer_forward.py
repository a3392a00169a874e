"""
A byte-level transformer stack, forward only
============================================

Tokenize text into bytes, run a small randomly initialized decoder
stack, and poke at the causal structure.
"""

import numpy as np

from xabr.data import ByteTokenizer
from xabr.tensor import no_grad
from xabr.transformer import StackConfig, TransformerStack

tok = ByteTokenizer()
ids = tok.tokenize("sum of 2 and 3")
print("token ids:", ids[:8], "... length", len(ids))

cfg = StackConfig(n_layers=2, d_model=32, n_heads=2, d_ff=128,
                  max_len=64, vocab_size=tok.vocab_size)
model = TransformerStack(cfg, seed=0)
n_scalars = sum(p.data.size for p in model.parameters().values())
print("parameter census:", n_scalars, "scalars in",
      len(model.parameters()), "tensors")

with no_grad():
    logits = model.forward_logits(ids)
print("logits shape:", logits.shape, "(positions x vocab)")

# causality: changing a late token must not move earlier positions
ids2 = list(ids)
ids2[-2] = ord("9")
with no_grad():
    logits2 = model.forward_logits(ids2)
early = np.abs(logits.data[:-3] - logits2.data[:-3]).max()
late = np.abs(logits.data[-2:] - logits2.data[-2:]).max()
print(f"max change before the edit: {early:.2e} (must be 0)")
print(f"max change at/after the edit: {late:.2e}")

# the next-token distribution at the last position
probs = np.exp(logits.data[-1] - logits.data[-1].max())
probs /= probs.sum()
print("most likely next byte at random init:", int(probs.argmax()),
      f"with p={probs.max():.4f} (roughly uniform, 1/259 = {1/259:.4f})")
