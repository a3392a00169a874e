"""Transformer stack tests: masking, causality, freezing, head
replacement, and shape contracts."""

import numpy as np
import numpy.testing as npt
import pytest

from xabr.tensor import Tensor, reset_tape, using_dtype
from xabr.transformer import (
    MASKED_LOGIT,
    StackConfig,
    TransformerStack,
    attention_bias,
    merge_heads,
    scaled_dot_attention,
    split_heads,
)


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


def tiny_config(**over):
    base = dict(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                vocab_size=11, max_len=10)
    base.update(over)
    return StackConfig(**base)


# ----------------------------------------------------------------- config


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        tiny_config(d_model=8, n_heads=3)


def test_config_rejects_nonpositive_dims():
    with pytest.raises(ValueError):
        tiny_config(d_model=0)
    with pytest.raises(ValueError):
        tiny_config(max_len=-1)


def test_config_roundtrips_through_dict():
    cfg = tiny_config()
    assert StackConfig(**cfg.to_dict()) == cfg


# ---------------------------------------------------------------- masking


def test_causal_mask_is_lower_triangular():
    stack = TransformerStack(tiny_config())
    mask = stack.causal_mask(4)
    npt.assert_array_equal(mask, np.tril(np.ones((4, 4), dtype=bool)))


def test_causal_mask_rejects_over_capacity():
    stack = TransformerStack(tiny_config(max_len=4))
    with pytest.raises(ValueError, match="max_len"):
        stack.causal_mask(5)


def test_attention_bias_values():
    permit = np.array([[True, False], [True, True]])
    bias = attention_bias(permit, batch=1, n_heads=2)
    assert bias.shape == (1, 2, 2, 2)
    assert bias.data[0, 0, 0, 0] == 0.0
    assert bias.data[0, 1, 0, 1] == MASKED_LOGIT


def test_masked_positions_get_zero_attention_weight():
    rng = np.random.default_rng(0)
    q = Tensor(rng.normal(0, 1, (1, 2, 3, 4)))
    k = Tensor(rng.normal(0, 1, (1, 2, 3, 4)))
    v = Tensor(rng.normal(0, 1, (1, 2, 3, 4)))
    bias = attention_bias(np.tril(np.ones((3, 3), dtype=bool)), 1, 2)
    _, weights = scaled_dot_attention(q, k, v, bias)
    # strictly-upper entries are future positions
    assert weights.data[0, 0, 0, 1] == pytest.approx(0.0, abs=1e-12)
    assert weights.data[0, 1, 1, 2] == pytest.approx(0.0, abs=1e-12)
    npt.assert_allclose(weights.data.sum(axis=-1), np.ones((1, 2, 3)), rtol=1e-5)


def test_equal_scores_attend_uniformly():
    """With identical keys the output is the mean of visible values."""
    q = Tensor(np.ones((1, 1, 2, 4)))
    k = Tensor(np.ones((1, 1, 3, 4)))
    v = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    bias = attention_bias(np.ones((2, 3), dtype=bool), 1, 1)
    out, _ = scaled_dot_attention(q, k, v, bias)
    npt.assert_allclose(out.data[0, 0, 0], v.data[0, 0].mean(axis=0), rtol=1e-5)


def test_split_merge_heads_roundtrip():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(0, 1, (2, 5, 8)))
    npt.assert_array_equal(merge_heads(split_heads(x, 4)).data, x.data)


# --------------------------------------------------------------- causality


def test_changing_future_tokens_leaves_past_logits_alone():
    stack = TransformerStack(tiny_config(), seed=5)
    ids_a = np.array([1, 2, 3, 4, 5])
    ids_b = ids_a.copy()
    ids_b[3:] = [9, 10]
    la = stack.forward_logits(ids_a).data
    lb = stack.forward_logits(ids_b).data
    npt.assert_array_equal(la[:3], lb[:3])
    assert not np.allclose(la[3:], lb[3:])


def test_trailing_pad_keys_do_not_change_real_logits():
    stack = TransformerStack(tiny_config(), seed=6)
    ids = np.array([[1, 2, 3]])
    padded = np.array([[1, 2, 3, 7, 7]])
    mask = np.array([[False, False, False, True, True]])
    plain = stack.forward_logits(ids).data
    masked = stack.forward_logits(padded, pad_mask=mask).data
    npt.assert_allclose(plain[0], masked[0, :3], atol=2e-6)


# ----------------------------------------------------------------- shapes


def test_forward_shapes_single_and_batch():
    stack = TransformerStack(tiny_config(), seed=0)
    assert stack.forward_logits(np.array([1, 2, 3])).shape == (3, 11)
    ids = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    assert stack.forward_logits(ids).shape == (2, 4, 11)
    assert stack.forward_hidden(ids).shape == (2, 4, 8)


def test_zero_layer_stack_is_embeddings_plus_norm_head():
    stack = TransformerStack(tiny_config(n_layers=0), seed=0)
    out = stack.forward_logits(np.array([1, 2]))
    assert out.shape == (2, 11)


def test_over_length_input_raises():
    stack = TransformerStack(tiny_config(max_len=4))
    with pytest.raises(ValueError, match="max_len"):
        stack.forward_logits(np.arange(5))


def test_forward_is_deterministic_for_a_seed():
    a = TransformerStack(tiny_config(), seed=9)
    b = TransformerStack(tiny_config(), seed=9)
    ids = np.array([3, 1, 4, 1, 5])
    npt.assert_array_equal(a.forward_logits(ids).data, b.forward_logits(ids).data)
    c = TransformerStack(tiny_config(), seed=10)
    assert not np.array_equal(a.forward_logits(ids).data,
                              c.forward_logits(ids).data)


# ------------------------------------------------------ parameters, freeze


def expected_param_count(cfg: StackConfig) -> int:
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 2 * d + 4 * d * d + 2 * d + d * f + f * d
    return (cfg.vocab_size * d + cfg.max_len * d
            + cfg.n_layers * per_layer + 2 * d + d * cfg.vocab_size)


def test_parameter_census_matches_formula():
    cfg = tiny_config()
    stack = TransformerStack(cfg)
    total = sum(p.data.size for p in stack.parameters().values())
    assert total == expected_param_count(cfg)


def test_parameter_names_are_stable():
    stack = TransformerStack(tiny_config(n_layers=1))
    names = set(stack.parameters())
    assert {"token_embedding", "position_embedding", "final_norm.gain",
            "final_norm.bias", "lm_head", "layers.0.attn.wq",
            "layers.0.mlp.w2", "layers.0.ln1.gain"} <= names


def test_freeze_all_and_frozen_mask():
    stack = TransformerStack(tiny_config())
    stack.freeze("all")
    assert all(stack.frozen_mask.values())
    assert stack.trainable_parameters() == {}


def test_freeze_embeddings_only():
    stack = TransformerStack(tiny_config())
    stack.freeze("embeddings_only")
    mask = stack.frozen_mask
    assert mask["token_embedding"] and mask["position_embedding"]
    assert not mask["lm_head"]
    assert not mask["layers.0.attn.wq"]


def test_freeze_rejects_unknown_selector():
    with pytest.raises(ValueError, match="selector"):
        TransformerStack(tiny_config()).freeze("half")


def test_replace_head_changes_width_and_trains():
    stack = TransformerStack(tiny_config(), seed=2)
    stack.freeze("all")
    stack.replace_head(29, seed=3)
    assert stack.lm_head.shape == (8, 29)
    assert stack.lm_head.requires_grad
    assert stack.vocab_out == 29
    out = stack.forward_logits(np.array([1, 2]))
    assert out.shape == (2, 29)


def test_replace_head_reinitializes_even_at_same_width():
    stack = TransformerStack(tiny_config(), seed=2)
    old = stack.lm_head.data.copy()
    stack.replace_head(11, seed=99)
    assert not np.array_equal(stack.lm_head.data, old)


# -------------------------------------------------------- frozen stack tape


def test_frozen_stack_records_no_tape_nodes():
    from xabr.tensor import active_tape
    stack = TransformerStack(tiny_config(), seed=0)
    stack.freeze("all")
    reset_tape()
    stack.forward_logits(np.array([1, 2, 3]))
    assert len(active_tape().nodes) == 0


def test_float64_stack_forward():
    with using_dtype(np.float64):
        stack = TransformerStack(tiny_config(), seed=0)
        out = stack.forward_logits(np.array([1, 2, 3]))
        assert out.data.dtype == np.float64
