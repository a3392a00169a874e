"""Training loop: masked cross-entropy, grouped AdamW with decoupled
weight decay, gradient clipping, early stopping on validation loss, and
perplexity evaluation.

Bridge parameters and receiver parameters train under separate learning
rates (defaults 1e-4 and 5e-5). Everything is seeded; two runs with the
same config produce bitwise identical loss sequences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .combined import CombinedModel
from .data import IGNORE, ByteTokenizer, TokenBatch, collate, split_train_val
from .tensor import Tensor, gather_lastdim, no_grad, reset_tape
from .transformer import TransformerStack


def cross_entropy_loss(logits: Tensor, labels, ignore: int = IGNORE) -> Tensor:
    """Mean of -log softmax(logits)[label] over non-ignored positions.

    ``logits`` is [..., V]; ``labels`` matches the leading shape. Raises
    if every label is ignored.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(
            f"labels shape {labels.shape} must match logits leading dims "
            f"{logits.shape[:-1]}")
    keep = labels != ignore
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy_loss: all labels are ignored")
    vocab = logits.shape[-1]
    valid = labels[keep]
    if valid.size and (valid.min() < 0 or valid.max() >= vocab):
        raise ValueError(f"labels must lie in [0, {vocab}) or equal {ignore}")

    log_probs = logits.log_softmax()
    safe = np.where(keep, labels, 0)
    picked = gather_lastdim(log_probs, safe)
    mask = Tensor(keep.astype(T.default_dtype()))
    return (picked * mask).sum() * (-1.0 / count)


@dataclass
class ParamGroup:
    """Trainable parameters sharing one learning rate."""

    name: str
    lr: float
    params: dict[str, Tensor]


def _decays(name: str, p: Tensor) -> bool:
    # decay matrix weights only: no biases, gains, or embeddings
    return p.data.ndim >= 2 and "embedding" not in name


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Groups must be disjoint and cover only trainable parameters; a
    missing gradient at step time is an error naming the parameter.
    """

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        seen = set()
        for group in groups:
            for name, p in group.params.items():
                if not p.requires_grad:
                    raise ValueError(f"frozen parameter {name} in group {group.name}")
                if id(p) in seen:
                    raise ValueError(f"parameter {name} appears in two groups")
                seen.add(id(p))
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {g.name: {k: np.zeros_like(p.data) for k, p in g.params.items()}
                  for g in groups}
        self.v = {g.name: {k: np.zeros_like(p.data) for k, p in g.params.items()}
                  for g in groups}

    def step(self) -> None:
        for group in self.groups:
            for name, p in group.params.items():
                if p.grad is None:
                    raise ValueError(
                        f"missing gradient for trainable parameter {name} "
                        f"(group {group.name})")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group in self.groups:
            m_g, v_g = self.m[group.name], self.v[group.name]
            for name, p in group.params.items():
                g = p.grad
                m_g[name] = self.beta1 * m_g[name] + (1 - self.beta1) * g
                v_g[name] = self.beta2 * v_g[name] + (1 - self.beta2) * (g * g)
                m_hat = m_g[name] / bc1
                v_hat = v_g[name] / bc2
                update = group.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                if self.weight_decay and _decays(name, p):
                    update = update + group.lr * self.weight_decay * p.data
                p.data -= update.astype(p.data.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params.values():
                p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group in self.groups:
            for name in group.params:
                out[f"opt.m.{name}"] = self.m[group.name][name]
                out[f"opt.v.{name}"] = self.v[group.name][name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for group in self.groups:
            for name in group.params:
                self.m[group.name][name] = arrays[f"opt.m.{name}"].copy()
                self.v[group.name][name] = arrays[f"opt.v.{name}"].copy()


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    tensors = [p for p in params if p.grad is not None]
    for p in tensors:
        total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = (max_norm / norm)
        for p in tensors:
            p.grad = (p.grad * p.grad.dtype.type(scale))
    return norm


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr_bridge: float = 1e-4
    lr_receiver: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 3
    min_delta: float = 1e-3
    seed: int = 42
    max_tokens: int = 4096
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr_bridge <= 0 or self.lr_receiver <= 0:
            raise ValueError("learning rates must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr_bridge": self.lr_bridge, "lr_receiver": self.lr_receiver,
                "weight_decay": self.weight_decay, "patience": self.patience,
                "min_delta": self.min_delta, "seed": self.seed,
                "max_tokens": self.max_tokens, "val_fraction": self.val_fraction}


@dataclass
class TrainState:
    """Bookkeeping across the epoch loop."""

    step: int = 0
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_val_loss: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    stopped_early: bool = False
    best_params: dict[str, np.ndarray] | None = None


def build_param_groups(model, cfg: TrainConfig) -> list[ParamGroup]:
    """Combined models get a bridge group at lr_bridge and a receiver
    group at lr_receiver; a plain stack trains as one receiver group."""
    if isinstance(model, CombinedModel):
        trainable = model.trainable_parameters()
        bridge = {k: p for k, p in trainable.items() if k.startswith("bridge.")}
        receiver = {k: p for k, p in trainable.items() if k.startswith("receiver.")}
        leftover = set(trainable) - set(bridge) - set(receiver)
        if leftover:
            raise ValueError(f"ungrouped trainable parameters: {sorted(leftover)}")
        return [ParamGroup("bridge", cfg.lr_bridge, bridge),
                ParamGroup("receiver", cfg.lr_receiver, receiver)]
    return [ParamGroup("receiver", cfg.lr_receiver, model.trainable_parameters())]


def batch_logits(model, batch: TokenBatch) -> Tensor:
    if isinstance(model, CombinedModel):
        return model.forward_batch(batch.ids, batch.pad_mask)
    return model.forward_logits(batch.ids, pad_mask=batch.pad_mask)


def batch_loss(model, batch: TokenBatch) -> Tensor:
    return cross_entropy_loss(batch_logits(model, batch), batch.labels)


def model_window(model) -> int:
    """Longest row a teacher-forced batch may carry for this model."""
    if isinstance(model, CombinedModel):
        return min(model.receiver.config.max_len, model.donor.config.max_len)
    return model.config.max_len


def _batches(examples, batch_size, tokenizer, window):
    for start in range(0, len(examples), batch_size):
        yield collate(examples[start:start + batch_size], tokenizer, max_len=window)


def _mean_loss(model, examples, batch_size, tokenizer) -> float:
    """Token-weighted mean loss without recording gradients."""
    total, count = 0.0, 0
    window = model_window(model)
    with no_grad():
        for batch in _batches(examples, batch_size, tokenizer, window):
            n = batch.n_target_tokens
            total += float(batch_loss(model, batch).item()) * n
            count += n
    if count == 0:
        raise ValueError("no target tokens in evaluation set")
    return total / count


def eval_perplexity(model, examples, tokenizer: ByteTokenizer | None = None,
                    batch_size: int = 16) -> dict[str, float]:
    """No-gradient evaluation over the corpus: token-weighted mean loss
    and its exponential."""
    if not examples:
        raise ValueError("evaluation corpus is empty")
    tokenizer = tokenizer or ByteTokenizer()
    loss = _mean_loss(model, examples, batch_size, tokenizer)
    return {"loss": loss, "perplexity": float(np.exp(loss))}


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def restore_snapshot(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, p in params.items():
        p.data[...] = snap[k]


def train(model, examples, cfg: TrainConfig,
          tokenizer: ByteTokenizer | None = None,
          log=None) -> TrainState:
    """Epoch loop with seeded shuffling, gradient clipping at global norm
    1.0, grouped AdamW steps, per-epoch validation, and early stopping
    once val loss fails to improve by min_delta for ``patience`` epochs.
    The best-validation parameter snapshot is kept in the returned state
    and restored into the model before returning.
    """
    tokenizer = tokenizer or ByteTokenizer()
    from .data import filter_by_length  # local import to avoid cycle at module load

    kept, dropped = filter_by_length(examples, tokenizer, cfg.max_tokens)
    if dropped and log:
        log(f"dropped {dropped} over-length examples (max_tokens={cfg.max_tokens})")
    if not kept:
        raise ValueError("corpus is empty after length filtering")
    if cfg.val_fraction > 0:
        train_set, val_set = split_train_val(kept, cfg.val_fraction, cfg.seed)
    else:
        train_set, val_set = list(kept), []
    if not train_set:
        raise ValueError("training split is empty")

    groups = build_param_groups(model, cfg)
    opt = AdamW(groups, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    trainable = {k: p for g in groups for k, p in g.params.items()}
    state = TrainState()
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    window = model_window(model)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(train_set))
        shuffled = [train_set[i] for i in order]
        epoch_total, epoch_tokens = 0.0, 0
        for batch in _batches(shuffled, cfg.batch_size, tokenizer, window):
            reset_tape()
            loss = batch_loss(model, batch)
            loss.backward()
            clip_grad_norm(trainable.values(), 1.0)
            opt.step()
            state.step += 1
            value = float(loss.item())
            state.step_losses.append(value)
            epoch_total += value * batch.n_target_tokens
            epoch_tokens += batch.n_target_tokens
        reset_tape()

        train_loss = epoch_total / epoch_tokens
        if val_set:
            val_loss = _mean_loss(model, val_set, cfg.batch_size, tokenizer)
        else:
            # val_fraction == 0: early-stop on the training signal instead
            val_loss = train_loss
        state.epoch_train_loss.append(train_loss)
        state.epoch_val_loss.append(val_loss)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs}: train {train_loss:.4f} "
                f"val {val_loss:.4f}")

        if val_loss < state.best_val_loss - cfg.min_delta:
            state.best_val_loss = val_loss
            state.epochs_since_improvement = 0
            state.best_params = _snapshot(trainable)
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= cfg.patience:
                state.stopped_early = True
                if log:
                    log(f"early stop after epoch {epoch + 1} "
                        f"(no improvement for {cfg.patience} epochs)")
                break

    if state.best_params is None:
        state.best_params = _snapshot(trainable)
        state.best_val_loss = state.epoch_val_loss[-1]
    restore_snapshot(trainable, state.best_params)
    return state
