"""Causal transformer stack used both as the frozen donor and as the
trainable receiver.

Pre-norm residual blocks, learned absolute position embeddings, bias-free
attention and MLP projections. The same implementation serves both roles;
only the config (depth, width, context length) differs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, embedding_lookup, layer_norm, matmul

INIT_STD = 0.02
MASKED_LOGIT = -1e9


@dataclass
class StackConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_len: int

    def __post_init__(self):
        for field in ("d_model", "n_heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"StackConfig.{field} must be positive")
        if self.n_layers < 0:
            raise ValueError("StackConfig.n_layers must be non-negative")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "d_model": self.d_model,
                "n_heads": self.n_heads, "d_ff": self.d_ff,
                "vocab_size": self.vocab_size, "max_len": self.max_len}


class LayerWeights:
    """Parameters of one pre-norm block: attention then MLP."""

    def __init__(self, cfg: StackConfig, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.d_ff
        self.ln1_gain = _param(np.ones(d))
        self.ln1_bias = _param(np.zeros(d))
        self.wq = _param(rng.normal(0.0, INIT_STD, (d, d)))
        self.wk = _param(rng.normal(0.0, INIT_STD, (d, d)))
        self.wv = _param(rng.normal(0.0, INIT_STD, (d, d)))
        self.wo = _param(rng.normal(0.0, INIT_STD, (d, d)))
        self.ln2_gain = _param(np.ones(d))
        self.ln2_bias = _param(np.zeros(d))
        self.w1 = _param(rng.normal(0.0, INIT_STD, (d, f)))
        self.w2 = _param(rng.normal(0.0, INIT_STD, (f, d)))

    def named(self) -> dict[str, Tensor]:
        return {"ln1.gain": self.ln1_gain, "ln1.bias": self.ln1_bias,
                "attn.wq": self.wq, "attn.wk": self.wk,
                "attn.wv": self.wv, "attn.wo": self.wo,
                "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias,
                "mlp.w1": self.w1, "mlp.w2": self.w2}


def _param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, n, d] -> [B, h, n, d/h]"""
    b, n, d = x.shape
    return x.reshape((b, n, n_heads, d // n_heads)).transpose((0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, n, dh] -> [B, n, h*dh]"""
    b, h, n, dh = x.shape
    return x.transpose((0, 2, 1, 3)).reshape((b, n, h * dh))


def attention_bias(permit: np.ndarray, batch: int, n_heads: int) -> Tensor:
    """Constant additive mask: 0 where attention is permitted, -1e9 where
    it is not. ``permit`` is [n, m] or [B, n, m] boolean."""
    if permit.ndim == 2:
        permit = np.broadcast_to(permit, (batch,) + permit.shape)
    bias = np.where(permit, 0.0, MASKED_LOGIT).astype(T.default_dtype())
    bias = np.broadcast_to(bias[:, None, :, :],
                           (batch, n_heads) + permit.shape[1:]).copy()
    return Tensor(bias)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Tensor):
    """Per-head attention; returns (output [B,h,n,dh], weights [B,h,n,m])."""
    dh = q.shape[-1]
    scores = matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / float(np.sqrt(dh)))
    weights = (scores + bias).softmax()
    return matmul(weights, v), weights


class TransformerStack:
    """Token + position embeddings, n_layers pre-norm blocks, final norm,
    and a linear vocabulary head."""

    def __init__(self, config: StackConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.token_embedding = _param(rng.normal(0.0, INIT_STD, (config.vocab_size, d)))
        self.position_embedding = _param(rng.normal(0.0, INIT_STD, (config.max_len, d)))
        self.layers = [LayerWeights(config, rng) for _ in range(config.n_layers)]
        self.final_norm_gain = _param(np.ones(d))
        self.final_norm_bias = _param(np.zeros(d))
        self.lm_head = _param(rng.normal(0.0, INIT_STD, (d, config.vocab_size)))
        self.vocab_out = config.vocab_size

    # -- parameter bookkeeping ------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {"token_embedding": self.token_embedding,
                  "position_embedding": self.position_embedding}
        for i, layer in enumerate(self.layers):
            for key, p in layer.named().items():
                params[f"layers.{i}.{key}"] = p
        params["final_norm.gain"] = self.final_norm_gain
        params["final_norm.bias"] = self.final_norm_bias
        params["lm_head"] = self.lm_head
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {k: not p.requires_grad for k, p in self.parameters().items()}

    def freeze(self, selector: str) -> None:
        """'all' freezes every parameter; 'embeddings_only' freezes the
        token and position embeddings."""
        if selector == "all":
            targets = self.parameters().values()
        elif selector == "embeddings_only":
            targets = (self.token_embedding, self.position_embedding)
        else:
            raise ValueError(f"unknown freeze selector {selector!r}")
        for p in targets:
            p.requires_grad = False
            p.grad = None

    def replace_head(self, vocab_out: int, seed: int = 0) -> None:
        """Reinitialize the vocabulary head at the requested width; the new
        head is always trainable."""
        if vocab_out < 1:
            raise ValueError("vocab_out must be positive")
        rng = np.random.default_rng(seed)
        self.lm_head = _param(rng.normal(0.0, INIT_STD, (self.config.d_model, vocab_out)))
        self.vocab_out = vocab_out

    # -- forward ---------------------------------------------------------

    def causal_mask(self, n: int) -> np.ndarray:
        """Lower-triangular permit matrix: position i may attend j iff j <= i."""
        if n < 1 or n > self.config.max_len:
            raise ValueError(
                f"sequence length {n} exceeds max_len {self.config.max_len}")
        return np.tril(np.ones((n, n), dtype=bool))

    def _permit(self, n: int, pad_mask: np.ndarray | None, batch: int) -> np.ndarray:
        permit = self.causal_mask(n)
        if pad_mask is None:
            return permit
        # keys at pad positions are never attended
        return permit[None, :, :] & ~pad_mask[:, None, :]

    def attention_block(self, h: Tensor, layer: LayerWeights, bias: Tensor) -> Tensor:
        """h + MultiHead(LayerNorm(h)) with causal/pad masking."""
        x = layer_norm(h, layer.ln1_gain, layer.ln1_bias)
        nh = self.config.n_heads
        q = split_heads(matmul(x, layer.wq), nh)
        k = split_heads(matmul(x, layer.wk), nh)
        v = split_heads(matmul(x, layer.wv), nh)
        attended, _ = scaled_dot_attention(q, k, v, bias)
        return h + matmul(merge_heads(attended), layer.wo)

    def feed_forward_block(self, h: Tensor, layer: LayerWeights) -> Tensor:
        """h + W2 . gelu(W1 . LayerNorm(h))"""
        x = layer_norm(h, layer.ln2_gain, layer.ln2_bias)
        return h + matmul(matmul(x, layer.w1).gelu(), layer.w2)

    def forward_hidden(self, ids, pad_mask: np.ndarray | None = None,
                       bridge_hook=None) -> Tensor:
        """Embed, run all blocks, apply the final norm. Returns hidden
        states, not logits: [n, d] for 1D ids, [B, n, d] for 2D.

        ``bridge_hook(layer_index, h) -> h`` runs after each block's MLP,
        letting a combined model splice in cross-attention output.
        """
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        batch, n = ids.shape
        if n > self.config.max_len:
            raise ValueError(
                f"sequence length {n} exceeds max_len {self.config.max_len}")

        tok = embedding_lookup(self.token_embedding, ids)
        pos_ids = np.broadcast_to(np.arange(n, dtype=np.int64), (batch, n))
        pos = embedding_lookup(self.position_embedding, pos_ids)
        h = tok + pos

        if self.layers:
            permit = self._permit(n, pad_mask, batch)
            bias = attention_bias(permit, batch, self.config.n_heads)
            for i, layer in enumerate(self.layers):
                h = self.attention_block(h, layer, bias)
                h = self.feed_forward_block(h, layer)
                if bridge_hook is not None:
                    h = bridge_hook(i, h)
        h = layer_norm(h, self.final_norm_gain, self.final_norm_bias)
        return h.reshape((n, self.config.d_model)) if single else h

    def lm_logits(self, hidden: Tensor) -> Tensor:
        """hidden . lm_head -> [... vocab_out]"""
        if hidden.shape[-1] != self.config.d_model:
            raise ValueError(
                f"hidden width {hidden.shape[-1]} != d_model {self.config.d_model}")
        return matmul(hidden, self.lm_head)

    def forward_logits(self, ids, pad_mask: np.ndarray | None = None) -> Tensor:
        return self.lm_logits(self.forward_hidden(ids, pad_mask))
