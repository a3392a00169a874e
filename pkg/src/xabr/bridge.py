"""Cross-attention bridge: projects donor hidden states into receiver
width, adapts them through a residual bottleneck, lets the receiver
attend into them, and gates the readout into the residual stream.

At initialization the bridge is exactly transparent: the adapter's up
projection and the attention output projection start at zero, so the
receiver's hidden states pass through unchanged until training opens
the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat_lastdim, layer_norm, matmul
from .transformer import (
    INIT_STD,
    attention_bias,
    merge_heads,
    scaled_dot_attention,
    split_heads,
)


@dataclass
class BridgeConfig:
    placement: tuple[int, ...]
    d_adapter: int
    n_bridge_heads: int
    gate_bias_init: float = -2.0

    def __post_init__(self):
        self.placement = tuple(sorted(self.placement))
        if len(set(self.placement)) != len(self.placement):
            raise ValueError("bridge placement contains duplicate layer indices")
        if any(i < 0 for i in self.placement):
            raise ValueError("bridge placement indices must be non-negative")
        if self.d_adapter < 1 or self.n_bridge_heads < 1:
            raise ValueError("d_adapter and n_bridge_heads must be positive")

    def validate_for(self, d_recv: int, n_recv_layers: int) -> None:
        if any(i >= n_recv_layers for i in self.placement):
            raise ValueError(
                f"bridge placement {self.placement} exceeds receiver depth {n_recv_layers}")
        if self.d_adapter >= d_recv:
            raise ValueError(
                f"d_adapter ({self.d_adapter}) must be a bottleneck, < d_recv ({d_recv})")
        if d_recv % self.n_bridge_heads != 0:
            raise ValueError(
                f"d_recv ({d_recv}) must be divisible by n_bridge_heads "
                f"({self.n_bridge_heads})")

    def to_dict(self) -> dict:
        return {"placement": list(self.placement), "d_adapter": self.d_adapter,
                "n_bridge_heads": self.n_bridge_heads,
                "gate_bias_init": self.gate_bias_init}


def _param(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


class BridgeLayer:
    """One bridge: projection -> adapter -> cross-attention -> gate.

    All parameters are trainable; a bridge never appears in a frozen mask.
    """

    def __init__(self, d_donor: int, d_recv: int, cfg: BridgeConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        da = cfg.d_adapter
        self.d_donor, self.d_recv = d_donor, d_recv
        self.n_heads = cfg.n_bridge_heads

        self.proj_w = _param(rng.normal(0.0, INIT_STD, (d_donor, d_recv)))
        self.proj_b = _param(np.zeros(d_recv))
        self.adapter_down = _param(rng.normal(0.0, INIT_STD, (d_recv, da)))
        self.adapter_down_b = _param(np.zeros(da))
        # zero-init keeps the adapter an identity at step 0
        self.adapter_up = _param(np.zeros((da, d_recv)))
        self.adapter_up_b = _param(np.zeros(d_recv))
        self.ln_gain = _param(np.ones(d_recv))
        self.ln_bias = _param(np.zeros(d_recv))
        self.wq = _param(rng.normal(0.0, INIT_STD, (d_recv, d_recv)))
        self.wk = _param(rng.normal(0.0, INIT_STD, (d_recv, d_recv)))
        self.wv = _param(rng.normal(0.0, INIT_STD, (d_recv, d_recv)))
        # zero-init output projection: the bridge contributes nothing until trained
        self.wo = _param(np.zeros((d_recv, d_recv)))
        self.gate_w = _param(rng.normal(0.0, INIT_STD, (2 * d_recv, d_recv)))
        self.gate_b = _param(np.full(d_recv, cfg.gate_bias_init))

        self.last_attn_shape: tuple[int, ...] | None = None

    def parameters(self) -> dict[str, Tensor]:
        return {"proj.w": self.proj_w, "proj.b": self.proj_b,
                "adapter.down": self.adapter_down, "adapter.down_b": self.adapter_down_b,
                "adapter.up": self.adapter_up, "adapter.up_b": self.adapter_up_b,
                "ln.gain": self.ln_gain, "ln.bias": self.ln_bias,
                "attn.wq": self.wq, "attn.wk": self.wk,
                "attn.wv": self.wv, "attn.wo": self.wo,
                "gate.w": self.gate_w, "gate.b": self.gate_b}

    def project_donor(self, donor_hidden: Tensor) -> Tensor:
        """Map donor-width states into receiver width."""
        if donor_hidden.shape[-1] != self.d_donor:
            raise ValueError(
                f"donor hidden width {donor_hidden.shape[-1]} != d_donor {self.d_donor}")
        return matmul(donor_hidden, self.proj_w) + self.proj_b

    def adapter_transform(self, x: Tensor) -> Tensor:
        """Residual bottleneck: x + up(gelu(down(x)))."""
        inner = (matmul(x, self.adapter_down) + self.adapter_down_b).gelu()
        return x + (matmul(inner, self.adapter_up) + self.adapter_up_b)

    def cross_attend(self, h_recv: Tensor, mem: Tensor,
                     mem_pad_mask: np.ndarray | None = None) -> Tensor:
        """Queries from LayerNorm(h_recv); keys and values from ``mem``.

        Every memory position is visible to every receiver position (no
        causal restriction); ``mem_pad_mask`` rows marked True are
        excluded. Both operands may be [n, d] or [B, n, d].
        """
        single = h_recv.ndim == 2
        if single:
            h_recv = h_recv.reshape((1,) + h_recv.shape)
        if mem.ndim == 2:
            mem = mem.reshape((1,) + mem.shape)
        batch, n, _ = h_recv.shape
        m = mem.shape[1]

        permit = np.ones((batch, n, m), dtype=bool)
        if mem_pad_mask is not None:
            valid = ~np.asarray(mem_pad_mask, dtype=bool)
            if valid.ndim == 1:
                valid = np.broadcast_to(valid, (batch, m))
            if not valid.any(axis=-1).all():
                raise ValueError("cross_attend: all memory positions are masked")
            permit = permit & valid[:, None, :]

        q = split_heads(matmul(layer_norm(h_recv, self.ln_gain, self.ln_bias),
                               self.wq), self.n_heads)
        k = split_heads(matmul(mem, self.wk), self.n_heads)
        v = split_heads(matmul(mem, self.wv), self.n_heads)
        bias = attention_bias(permit, batch, self.n_heads)
        attended, weights = scaled_dot_attention(q, k, v, bias)
        self.last_attn_shape = weights.shape
        out = matmul(merge_heads(attended), self.wo)
        return out.reshape((n, self.d_recv)) if single else out

    def gated_blend(self, h_self: Tensor, h_ext: Tensor) -> Tensor:
        """g = sigmoid([h_self || h_ext] W + b); g*h_ext + (1-g)*h_self."""
        if h_self.shape != h_ext.shape:
            raise ValueError(
                f"gated_blend: shapes {h_self.shape} and {h_ext.shape} differ")
        pre = matmul(concat_lastdim(h_self, h_ext), self.gate_w) + self.gate_b
        g = pre.sigmoid()
        one_minus = (-g) + 1.0
        return g * h_ext + one_minus * h_self

    def forward(self, h_recv: Tensor, donor_hidden: Tensor,
                donor_pad_mask: np.ndarray | None = None) -> Tensor:
        """Full bridge pass, inserted after a receiver block's MLP.

        The gate blends the receiver state with its cross-attention
        enhanced version (h_recv + attention readout), which reduces to
        h_recv + g * readout; with the zero-initialized output projection
        this makes the bridge an exact identity at step 0.
        """
        mem = self.adapter_transform(self.project_donor(donor_hidden))
        ext = self.cross_attend(h_recv, mem, donor_pad_mask)
        return self.gated_blend(h_recv, h_recv + ext)
