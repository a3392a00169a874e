"""xabr: cross-attention bridge layers that feed a frozen donor
transformer's hidden states into a small trainable receiver."""

from .tensor import (
    Tensor,
    backward,
    embedding_lookup,
    layer_norm,
    no_grad,
    reset_tape,
    set_default_dtype,
    using_dtype,
    zero_grads,
)
from .transformer import StackConfig, TransformerStack
from .bridge import BridgeConfig, BridgeLayer
from .combined import CombinedModel, GenerationParams
from .data import (
    ByteTokenizer,
    Example,
    TokenBatch,
    collate,
    filter_by_length,
    gen_synthetic,
    load_jsonl,
    split_train_val,
)
from .training import (
    AdamW,
    ParamGroup,
    TrainConfig,
    TrainState,
    cross_entropy_loss,
    eval_perplexity,
    train,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
