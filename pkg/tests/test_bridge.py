"""Bridge layer tests: zero-init transparency, gating behavior, adapter
residual structure, and cross-attention masking."""

import numpy as np
import numpy.testing as npt
import pytest

from xabr.bridge import BridgeConfig, BridgeLayer
from xabr.tensor import Tensor, reset_tape


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


def make_bridge(d_donor=12, d_recv=8, gate_bias=-2.0, seed=0):
    cfg = BridgeConfig(placement=(0,), d_adapter=2, n_bridge_heads=2,
                       gate_bias_init=gate_bias)
    return BridgeLayer(d_donor, d_recv, cfg, seed=seed)


# ----------------------------------------------------------------- config


def test_config_sorts_and_rejects_duplicate_placement():
    cfg = BridgeConfig(placement=(2, 0), d_adapter=2, n_bridge_heads=2)
    assert cfg.placement == (0, 2)
    with pytest.raises(ValueError, match="duplicate"):
        BridgeConfig(placement=(1, 1), d_adapter=2, n_bridge_heads=2)


def test_config_validate_for_receiver_geometry():
    cfg = BridgeConfig(placement=(0, 3), d_adapter=2, n_bridge_heads=2)
    with pytest.raises(ValueError, match="depth"):
        cfg.validate_for(d_recv=8, n_recv_layers=2)
    wide = BridgeConfig(placement=(0,), d_adapter=8, n_bridge_heads=2)
    with pytest.raises(ValueError, match="bottleneck"):
        wide.validate_for(d_recv=8, n_recv_layers=2)
    odd = BridgeConfig(placement=(0,), d_adapter=2, n_bridge_heads=3)
    with pytest.raises(ValueError, match="divisible"):
        odd.validate_for(d_recv=8, n_recv_layers=2)


# ----------------------------------------------------------- transparency


def test_bridge_is_identity_at_zero_init():
    """Zero adapter-up and attention output leave h_recv untouched."""
    bridge = make_bridge(seed=1)
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(0, 1, (2, 5, 8)))
    mem = Tensor(rng.normal(0, 1, (2, 9, 12)))
    out = bridge.forward(h, mem)
    npt.assert_allclose(out.data, h.data, atol=1e-6)


def test_closed_gate_suppresses_a_live_bridge():
    """With gate pre-activations near -20 the external branch vanishes."""
    bridge = make_bridge(seed=3)
    rng = np.random.default_rng(4)
    # wake the zero-initialized projections so the bridge has output
    bridge.wo.data[...] = rng.normal(0, 0.5, bridge.wo.shape)
    bridge.adapter_up.data[...] = rng.normal(0, 0.5, bridge.adapter_up.shape)
    bridge.gate_w.data[...] = 0.0
    bridge.gate_b.data[...] = -20.0
    h = Tensor(rng.normal(0, 1, (1, 4, 8)))
    mem = Tensor(rng.normal(0, 1, (1, 6, 12)))
    out = bridge.forward(h, mem)
    npt.assert_allclose(out.data, h.data, atol=1e-5)
    live = make_bridge(seed=3)
    live.wo.data[...] = bridge.wo.data
    live.adapter_up.data[...] = bridge.adapter_up.data
    assert not np.allclose(live.forward(h, mem).data, h.data, atol=1e-5)


def test_gate_bias_init_sets_preactivation():
    bridge = make_bridge(gate_bias=-2.0)
    npt.assert_array_equal(bridge.gate_b.data, np.full(8, -2.0))


# ---------------------------------------------------------------- adapter


def test_adapter_is_residual_identity_at_init():
    bridge = make_bridge(seed=5)
    x = Tensor(np.random.default_rng(6).normal(0, 1, (3, 8)))
    npt.assert_allclose(bridge.adapter_transform(x).data, x.data, atol=1e-7)


def test_adapter_bottleneck_shapes():
    bridge = make_bridge()
    assert bridge.adapter_down.shape == (8, 2)
    assert bridge.adapter_up.shape == (2, 8)


def test_projection_maps_donor_width():
    bridge = make_bridge()
    mem = Tensor(np.zeros((2, 4, 12)))
    assert bridge.project_donor(mem).shape == (2, 4, 8)
    with pytest.raises(ValueError, match="width"):
        bridge.project_donor(Tensor(np.zeros((2, 4, 9))))


# ---------------------------------------------------------- cross-attention


def test_cross_attention_shapes_and_recorded_weights():
    bridge = make_bridge(seed=7)
    rng = np.random.default_rng(8)
    h = Tensor(rng.normal(0, 1, (2, 5, 8)))
    mem = Tensor(rng.normal(0, 1, (2, 9, 8)))
    out = bridge.cross_attend(h, mem)
    assert out.shape == (2, 5, 8)
    assert bridge.last_attn_shape == (2, 2, 5, 9)


def test_cross_attention_accepts_unbatched_operands():
    bridge = make_bridge(seed=7)
    rng = np.random.default_rng(9)
    h = Tensor(rng.normal(0, 1, (5, 8)))
    mem = Tensor(rng.normal(0, 1, (9, 8)))
    assert bridge.cross_attend(h, mem).shape == (5, 8)


def test_masked_memory_positions_have_no_influence():
    bridge = make_bridge(seed=10)
    bridge.wo.data[...] = np.random.default_rng(11).normal(0, 0.5, bridge.wo.shape)
    rng = np.random.default_rng(12)
    h = Tensor(rng.normal(0, 1, (1, 3, 8)))
    mem_a = rng.normal(0, 1, (1, 6, 8))
    mem_b = mem_a.copy()
    mem_b[0, 4:] = 99.0  # only masked positions change
    mask = np.array([[False, False, False, False, True, True]])
    out_a = bridge.cross_attend(h, Tensor(mem_a), mask).data
    out_b = bridge.cross_attend(h, Tensor(mem_b), mask).data
    npt.assert_allclose(out_a, out_b, atol=1e-6)


def test_fully_masked_memory_raises():
    bridge = make_bridge()
    h = Tensor(np.zeros((1, 3, 8)))
    mem = Tensor(np.zeros((1, 4, 8)))
    with pytest.raises(ValueError, match="masked"):
        bridge.cross_attend(h, mem, np.ones((1, 4), dtype=bool))


# ------------------------------------------------------------------- gate


def test_gated_blend_is_convex_combination():
    bridge = make_bridge(seed=13)
    rng = np.random.default_rng(14)
    for _ in range(5):
        a = rng.normal(0, 1, (1, 4, 8))
        b = rng.normal(0, 1, (1, 4, 8))
        out = bridge.gated_blend(Tensor(a), Tensor(b)).data
        lo = np.minimum(a, b) - 1e-6
        hi = np.maximum(a, b) + 1e-6
        assert (out >= lo).all() and (out <= hi).all()


def test_gated_blend_shape_mismatch_raises():
    bridge = make_bridge()
    with pytest.raises(ValueError, match="shapes"):
        bridge.gated_blend(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 8))))


def test_forward_reduces_to_residual_gated_readout():
    """forward == h + g * cross_out, with g from the blend gate."""
    bridge = make_bridge(seed=15)
    rng = np.random.default_rng(16)
    bridge.wo.data[...] = rng.normal(0, 0.5, bridge.wo.shape)
    h = Tensor(rng.normal(0, 1, (1, 4, 8)))
    mem_raw = Tensor(rng.normal(0, 1, (1, 6, 12)))
    out = bridge.forward(h, mem_raw)

    mem = bridge.adapter_transform(bridge.project_donor(mem_raw))
    ext = bridge.cross_attend(h, mem)
    manual = bridge.gated_blend(h, h + ext)
    npt.assert_allclose(out.data, manual.data, atol=1e-6)
    delta = out.data - h.data
    assert np.abs(delta).max() > 0  # gate partially open at -2 bias


def test_all_bridge_parameters_are_trainable():
    bridge = make_bridge()
    params = bridge.parameters()
    assert len(params) == 14
    assert all(p.requires_grad for p in params.values())
