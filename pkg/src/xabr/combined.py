"""Combined model: frozen donor, trainable receiver, bridges in between.

The donor consumes the full token sequence and exports its final hidden
states as bridge memory; the receiver consumes at most its own context
window (the suffix) and emits logits over the shared vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bridge import BridgeConfig, BridgeLayer
from .tensor import Tensor, no_grad, softmax
from .transformer import TransformerStack


@dataclass
class GenerationParams:
    max_new_tokens: int = 64
    temperature: float = 0.0
    seed: int = 0
    eos_id: int = 257

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class CombinedModel:
    """Wires donor, bridges and receiver into one forward pass.

    Construction freezes the donor completely, freezes the receiver's
    embeddings, and replaces the receiver's head to match the shared
    tokenizer, so the trainable set is exactly the bridges plus the
    receiver minus its embeddings.
    """

    def __init__(self, donor: TransformerStack, receiver: TransformerStack,
                 bridge_config: BridgeConfig, vocab_out: int, seed: int = 0):
        bridge_config.validate_for(receiver.config.d_model, receiver.config.n_layers)
        self.donor = donor
        self.receiver = receiver
        self.bridge_config = bridge_config
        donor.freeze("all")
        receiver.freeze("embeddings_only")
        receiver.replace_head(vocab_out, seed=seed + 1)
        self.bridges = {
            i: BridgeLayer(donor.config.d_model, receiver.config.d_model,
                           bridge_config, seed=seed + 100 + i)
            for i in bridge_config.placement
        }

    # -- parameter bookkeeping ------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name, p in self.donor.parameters().items():
            params[f"donor.{name}"] = p
        for name, p in self.receiver.parameters().items():
            params[f"receiver.{name}"] = p
        for i, bridge in self.bridges.items():
            for name, p in bridge.parameters().items():
                params[f"bridge.{i}.{name}"] = p
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.parameters().items() if p.requires_grad}

    # -- forward ---------------------------------------------------------

    def forward(self, ids) -> Tensor:
        """Single-sequence forward: donor reads all of ``ids``, the
        receiver reads the last ``receiver.max_len`` of them. Returns
        receiver logits [n_recv, vocab_out]."""
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[0]
        if n > self.donor.config.max_len:
            raise ValueError(
                f"sequence length {n} exceeds donor max_len "
                f"{self.donor.config.max_len}")
        donor_hidden = self.donor.forward_hidden(ids)
        recv_ids = ids[-self.receiver.config.max_len:]

        def hook(layer_idx, h):
            if layer_idx in self.bridges:
                return self.bridges[layer_idx].forward(
                    h, donor_hidden.reshape((1,) + donor_hidden.shape))
            return h

        hidden = self.receiver.forward_hidden(recv_ids, bridge_hook=hook)
        return self.receiver.lm_logits(hidden)

    def forward_batch(self, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        """Batched teacher-forcing forward for training; requires the
        batch length to fit the receiver's window so labels align."""
        ids = np.asarray(ids, dtype=np.int64)
        batch, n = ids.shape
        if n > self.receiver.config.max_len:
            raise ValueError(
                f"training batch length {n} exceeds receiver max_len "
                f"{self.receiver.config.max_len}")
        if n > self.donor.config.max_len:
            raise ValueError(
                f"sequence length {n} exceeds donor max_len "
                f"{self.donor.config.max_len}")
        donor_hidden = self.donor.forward_hidden(ids, pad_mask=pad_mask)

        def hook(layer_idx, h):
            if layer_idx in self.bridges:
                return self.bridges[layer_idx].forward(h, donor_hidden, pad_mask)
            return h

        hidden = self.receiver.forward_hidden(ids, pad_mask=pad_mask, bridge_hook=hook)
        return self.receiver.lm_logits(hidden)

    # -- generation ------------------------------------------------------

    def generate(self, prompt_ids, params: GenerationParams) -> list[int]:
        """Append tokens one at a time (full re-forward per step, no
        cache). Returns the newly generated ids, including the eos if
        one was produced. Temperature 0 is greedy; otherwise sampling is
        seeded and reproducible."""
        prompt_ids = list(int(t) for t in prompt_ids)
        if not prompt_ids:
            raise ValueError("prompt must be non-empty")
        if len(prompt_ids) > self.donor.config.max_len:
            raise ValueError(
                f"prompt length {len(prompt_ids)} exceeds donor max_len "
                f"{self.donor.config.max_len}")
        rng = np.random.default_rng(params.seed)
        out: list[int] = []
        ids = prompt_ids
        with no_grad():
            for _ in range(params.max_new_tokens):
                if len(ids) > self.donor.config.max_len:
                    break
                logits = self.forward(np.asarray(ids, dtype=np.int64))
                last = logits.data[-1]
                if params.temperature == 0.0:
                    nxt = int(np.argmax(last))
                else:
                    probs = softmax(Tensor(last / params.temperature)).data
                    probs = probs.astype(np.float64)
                    probs /= probs.sum()
                    nxt = int(rng.choice(len(probs), p=probs))
                out.append(nxt)
                ids = ids + [nxt]
                if nxt == params.eos_id:
                    break
        return out


def _sample(last_logits: np.ndarray, params: GenerationParams, rng) -> int:
    if params.temperature == 0.0:
        return int(np.argmax(last_logits))
    probs = softmax(Tensor(last_logits / params.temperature)).data
    probs = probs.astype(np.float64)
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


def stack_generate(stack: TransformerStack, prompt_ids,
                   params: GenerationParams) -> list[int]:
    """Generation for a plain stack with a sliding context window: each
    step forwards the last max_len tokens."""
    ids = list(int(t) for t in prompt_ids)
    if not ids:
        raise ValueError("prompt must be non-empty")
    rng = np.random.default_rng(params.seed)
    out: list[int] = []
    with no_grad():
        for _ in range(params.max_new_tokens):
            window = np.asarray(ids[-stack.config.max_len:], dtype=np.int64)
            logits = stack.forward_logits(window)
            nxt = _sample(logits.data[-1], params, rng)
            out.append(nxt)
            ids.append(nxt)
            if nxt == params.eos_id:
                break
    return out


def generate_tokens(model, prompt_ids, params: GenerationParams) -> list[int]:
    """Dispatch to the right generation loop for the model kind."""
    if isinstance(model, CombinedModel):
        return model.generate(prompt_ids, params)
    return stack_generate(model, prompt_ids, params)
