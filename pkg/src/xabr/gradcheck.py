"""Central finite-difference gradient checking.

The numeric side never touches the tape: it perturbs one stored scalar at
a time and re-evaluates the loss under ``no_grad``. Comparison is
relative with an absolute escape for near-zero entries, since a pure
relative test is undefined where the true gradient vanishes and float32
evaluation noise puts a floor of roughly ``eps32 * |loss| / h`` on the
numeric estimate.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


def numeric_gradient(loss_fn, param: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference d(loss)/d(param), one element at a time."""
    flat = param.data.reshape(-1)
    if flat.base is None and flat is not param.data:
        raise ValueError("parameter data must be contiguous for in-place perturbation")
    grad = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            hi = flat.dtype.type(orig + h)
            lo = flat.dtype.type(orig - h)
            flat[i] = hi
            f_hi = float(loss_fn().item())
            flat[i] = lo
            f_lo = float(loss_fn().item())
            flat[i] = orig
            grad[i] = (f_hi - f_lo) / (float(hi) - float(lo))
    return grad.reshape(param.shape)


def analytic_gradients(loss_fn, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """One backward pass on a fresh tape; returns grads per parameter name."""
    for p in params.values():
        p.grad = None
    reset_tape()
    loss = loss_fn()
    backward(loss)
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise AssertionError(f"no gradient reached parameter {name}")
        grads[name] = np.array(p.grad, dtype=np.float64)
    return grads


def compare_gradients(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float, atol: float) -> float:
    """Worst-case error: |a - n| / max(|a|, |n|) where either side is
    above ``atol``, else 0. Returns the max such relative error."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(diff <= atol, 0.0, diff / np.maximum(denom, 1e-300))
    return float(rel.max()) if rel.size else 0.0


def check_gradients(loss_fn, params: dict[str, Tensor], *, h: float = 1e-3,
                    rtol: float = 1e-3, atol: float = 1e-4) -> dict[str, float]:
    """Assert analytic vs numeric gradients agree for every parameter.

    Returns the worst relative error per parameter name; raises
    AssertionError naming the first parameter out of tolerance.
    """
    analytic = analytic_gradients(loss_fn, params)
    report = {}
    for name, p in params.items():
        num = numeric_gradient(loss_fn, p, h=h)
        err = compare_gradients(analytic[name], num, rtol=rtol, atol=atol)
        report[name] = err
        if err > rtol:
            idx = int(np.argmax(np.abs(analytic[name] - num)))
            raise AssertionError(
                f"gradient mismatch for {name}: max rel error {err:.3e} > {rtol:.0e} "
                f"(analytic {analytic[name].reshape(-1)[idx]:.6g}, "
                f"numeric {num.reshape(-1)[idx]:.6g} at flat index {idx})")
    return report


# -- the op/model suite behind `gradcheck` ------------------------------

SUITE_MODULES = ("ops", "transformer", "bridge", "combined")


def _rand(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _const(rng, shape) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape))


def _ops_cases(rng):
    from .tensor import (concat_lastdim, embedding_lookup, gather_lastdim,
                         layer_norm, log_softmax, matmul, softmax, tmean)
    from .training import cross_entropy_loss

    cases = []

    x, b, c = _rand(rng, (2, 3)), _rand(rng, (3,)), _const(rng, (2, 3))
    cases.append(("add_broadcast",
                  lambda x=x, b=b, c=c: ((x + b) * c).sum(), {"x": x, "b": b}))

    x, y, c = _rand(rng, (2, 3)), _rand(rng, (2, 3)), _const(rng, (2, 3))
    cases.append(("sub_mul",
                  lambda x=x, y=y, c=c: (((x - y) * y) * c).sum(),
                  {"x": x, "y": y}))

    x, w, c = _rand(rng, (3, 4)), _rand(rng, (4, 2)), _const(rng, (3, 2))
    cases.append(("matmul_2d",
                  lambda x=x, w=w, c=c: (matmul(x, w) * c).sum(),
                  {"x": x, "w": w}))

    x, w, c = _rand(rng, (2, 3, 4)), _rand(rng, (4, 2)), _const(rng, (2, 3, 2))
    cases.append(("matmul_batched",
                  lambda x=x, w=w, c=c: (matmul(x, w) * c).sum(),
                  {"x": x, "w": w}))

    a, b2, c = _rand(rng, (2, 3, 4)), _rand(rng, (2, 4, 2)), _const(rng, (2, 3, 2))
    cases.append(("matmul_stacked",
                  lambda a=a, b=b2, c=c: (matmul(a, b) * c).sum(),
                  {"a": a, "b": b2}))

    x, c = _rand(rng, (2, 6)), _const(rng, (3, 2, 2))
    cases.append(("reshape_transpose",
                  lambda x=x, c=c: (x.reshape((2, 3, 2)).transpose((1, 0, 2)) * c).sum(),
                  {"x": x}))

    a, b3, c = _rand(rng, (2, 3)), _rand(rng, (2, 2)), _const(rng, (2, 5))
    cases.append(("concat_lastdim",
                  lambda a=a, b=b3, c=c: (concat_lastdim(a, b) * c).sum(),
                  {"a": a, "b": b3}))

    x = _rand(rng, (3, 4))
    cases.append(("mean_of_square", lambda x=x: tmean(x * x), {"x": x}))

    x, c = _rand(rng, (2, 5)), _const(rng, (2, 5))
    cases.append(("gelu", lambda x=x, c=c: (x.gelu() * c).sum(), {"x": x}))
    x2, c2 = _rand(rng, (2, 5)), _const(rng, (2, 5))
    cases.append(("sigmoid", lambda x=x2, c=c2: (x.sigmoid() * c).sum(), {"x": x2}))

    x, c = _rand(rng, (3, 5)), _const(rng, (3, 5))
    cases.append(("softmax",
                  lambda x=x, c=c: (softmax(x) * c).sum(), {"x": x}))
    x2, c2 = _rand(rng, (3, 5)), _const(rng, (3, 5))
    cases.append(("log_softmax",
                  lambda x=x2, c=c2: (log_softmax(x) * c).sum(), {"x": x2}))

    x, g, b4 = _rand(rng, (3, 6)), _rand(rng, (6,)), _rand(rng, (6,))
    c = _const(rng, (3, 6))
    cases.append(("layer_norm",
                  lambda x=x, g=g, b=b4, c=c: (layer_norm(x, g, b) * c).sum(),
                  {"x": x, "gain": g, "bias": b4}))

    table = _rand(rng, (7, 4))
    ids = np.array([[0, 3, 6], [2, 3, 1]])
    c = _const(rng, (2, 3, 4))
    cases.append(("embedding_lookup",
                  lambda t=table, c=c: (embedding_lookup(t, ids) * c).sum(),
                  {"table": table}))

    x = _rand(rng, (4, 7))
    idx = np.array([1, 0, 6, 3])
    cases.append(("gather_log_softmax",
                  lambda x=x: gather_lastdim(log_softmax(x), idx).sum(),
                  {"x": x}))

    logits = _rand(rng, (5, 7))
    labels = np.array([2, 6, -1, 0, 3])
    cases.append(("cross_entropy",
                  lambda l=logits: cross_entropy_loss(l, labels), {"logits": logits}))
    return cases


def _transformer_cases(rng):
    from .training import cross_entropy_loss
    from .transformer import (StackConfig, TransformerStack, attention_bias,
                              scaled_dot_attention)

    cases = []
    q, k, v = _rand(rng, (1, 2, 5, 3)), _rand(rng, (1, 2, 5, 3)), _rand(rng, (1, 2, 5, 3))
    c = _const(rng, (1, 2, 5, 3))
    bias = attention_bias(np.tril(np.ones((5, 5), dtype=bool)), 1, 2)

    def attn_loss(q=q, k=k, v=v, bias=bias, c=c):
        out, _ = scaled_dot_attention(q, k, v, bias)
        return (out * c).sum()

    cases.append(("scaled_dot_attention", attn_loss, {"q": q, "k": k, "v": v}))

    cfg = StackConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16,
                      vocab_size=11, max_len=8)
    stack = TransformerStack(cfg, seed=3)
    ids = np.array([1, 4, 9, 2, 7, 0])
    labels = np.array([4, 9, 2, 7, 0, 10])
    cases.append(("transformer_stack",
                  lambda s=stack: cross_entropy_loss(s.forward_logits(ids), labels),
                  stack.trainable_parameters()))
    return cases


def _bridge_cases(rng):
    from .bridge import BridgeConfig, BridgeLayer

    cfg = BridgeConfig(placement=(0,), d_adapter=2, n_bridge_heads=2,
                       gate_bias_init=-1.0)
    layer = BridgeLayer(d_donor=8, d_recv=8, cfg=cfg, seed=5)
    # zero-init tensors get a nudge so their gradients are informative
    layer.adapter_up.data[...] = rng.normal(0.0, 0.1, layer.adapter_up.shape)
    layer.wo.data[...] = rng.normal(0.0, 0.1, layer.wo.shape)
    h_recv = _const(rng, (1, 4, 8))
    mem = _const(rng, (1, 6, 8))
    c = _const(rng, (1, 4, 8))
    return [("bridge_layer",
             lambda l=layer, h=h_recv, m=mem, c=c: (l.forward(h, m) * c).sum(),
             layer.parameters())]


def _combined_cases(rng):
    from .bridge import BridgeConfig
    from .combined import CombinedModel
    from .training import cross_entropy_loss
    from .transformer import StackConfig, TransformerStack

    stack_cfg = StackConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32,
                            vocab_size=13, max_len=16)
    donor = TransformerStack(stack_cfg, seed=7)
    receiver = TransformerStack(stack_cfg, seed=8)
    bridge_cfg = BridgeConfig(placement=(0,), d_adapter=4, n_bridge_heads=2,
                              gate_bias_init=-1.0)
    model = CombinedModel(donor, receiver, bridge_cfg, vocab_out=13, seed=9)
    bridge = model.bridges[0]
    bridge.adapter_up.data[...] = rng.normal(0.0, 0.1, bridge.adapter_up.shape)
    bridge.wo.data[...] = rng.normal(0.0, 0.1, bridge.wo.shape)
    ids = np.array([1, 5, 9, 2, 11, 0, 3])
    labels = np.array([5, 9, 2, 11, 0, 3, 12])
    return [("combined_model",
             lambda m=model: cross_entropy_loss(m.forward(ids), labels),
             model.trainable_parameters())]


_SUITE_BUILDERS = {"ops": _ops_cases, "transformer": _transformer_cases,
                   "bridge": _bridge_cases, "combined": _combined_cases}


def run_suite(module: str | None = None, dtype: str = "f32"):
    """Finite-difference checks over every op and the small full models.

    Returns [(case name, worst relative error)], raising on the first
    failure. ``dtype`` selects f32 (h=1e-3, tol 1e-2) or f64 (h=1e-5,
    tol 1e-6) mode.
    """
    if module is not None and module not in SUITE_MODULES:
        raise ValueError(
            f"unknown gradcheck module {module!r} (choose from {SUITE_MODULES})")
    if dtype == "f32":
        h, rtol, atol, np_dtype = 1e-3, 1e-2, 1e-3, np.float32
    elif dtype == "f64":
        # measured FD noise floor is ~2e-9; the escape sits just above it
        h, rtol, atol, np_dtype = 1e-5, 1e-6, 1e-8, np.float64
    else:
        raise ValueError("dtype must be 'f32' or 'f64'")

    from .tensor import using_dtype
    names = (module,) if module else SUITE_MODULES
    results = []
    with using_dtype(np_dtype):
        rng = np.random.default_rng(20240901)
        for name in names:
            for case_name, loss_fn, params in _SUITE_BUILDERS[name](rng):
                report = check_gradients(loss_fn, params, h=h, rtol=rtol, atol=atol)
                worst = max(report.values()) if report else 0.0
                results.append((case_name, worst))
    return results
