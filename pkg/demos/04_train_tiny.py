"""
Training a small stack end to end
=================================

Sixty-four synthetic arithmetic examples, a two-layer byte model, AdamW
with early stopping. Takes well under a minute on one core.
"""

from xabr.compare import generate_response
from xabr.data import ByteTokenizer, gen_synthetic
from xabr.training import TrainConfig, eval_perplexity, train
from xabr.transformer import StackConfig, TransformerStack

tok = ByteTokenizer()
corpus = gen_synthetic(64, seed=7)
print("example prompt:  ", corpus[0].prompt)
print("example response:", corpus[0].response)

cfg = StackConfig(n_layers=2, d_model=32, n_heads=2, d_ff=128,
                  max_len=96, vocab_size=tok.vocab_size)
model = TransformerStack(cfg, seed=0)

tcfg = TrainConfig(epochs=12, batch_size=8, lr_receiver=3e-3,
                   patience=4, seed=1, val_fraction=0.15)
state = train(model, corpus, tcfg, tok, log=print)

print()
print("epoch train losses:", [round(x, 3) for x in state.epoch_train_loss])
print("best val loss:", round(state.best_val_loss, 4),
      "| stopped early:", state.stopped_early)

stats = eval_perplexity(model, corpus, tok)
print("whole-corpus loss:", round(stats["loss"], 4),
      "perplexity:", round(stats["perplexity"], 2))

# the model has mostly learned the response template by now; the
# arithmetic itself needs far more data than 64 examples
print()
print("greedy completion of 'sum of 3 and 4':")
print(" ", generate_response(model, "sum of 3 and 4", tok))
