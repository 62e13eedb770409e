"""Finite-difference checks for every hand-written backward pass.

Each check builds a small float64 instance, contracts the forward output with a
fixed random tensor to get a scalar, and compares the analytic gradient with
central differences. The error reported is norm-wise:
``max|analytic - numeric| / max|numeric|``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .baselines import LCN, ConvNet
from .layer import SMoELayer, top_e_select
from .losses import importance_loss, load_loss, mse_loss, rc_loss, spatial_agreement_loss
from .tensor import conv2d_backward, conv2d_forward, make_rng

F64 = np.float64
EPS = 1e-6


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros(x.shape, dtype=F64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(np.asarray(analytic, F64) - numeric))) / scale


def _worst(pairs) -> float:
    return max(rel_error(a, n) for a, n in pairs)


def check_conv2d(rng) -> float:
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((2, 3, 5, 6))

    def f():
        return float(np.sum(conv2d_forward(x, w, b) * r))

    dx, dw, db = conv2d_backward(r, x, w)
    return _worst([(dx, numeric_grad(f, x)), (dw, numeric_grad(f, w)), (db, numeric_grad(f, b))])


def check_lcn(rng) -> float:
    lcn = LCN(2, 5, 6, rng=rng)
    lcn.params = {k: v.astype(F64) for k, v in lcn.params.items()}
    lcn.params["b"] = rng.standard_normal(lcn.params["b"].shape)
    x = rng.standard_normal((2, 2, 5, 6))
    r = rng.standard_normal((2, 1, 5, 6))

    def f():
        return float(np.sum(lcn.forward(x)[0] * r))

    out, cache = lcn.forward(x)
    g = lcn.backward(r, cache)
    return _worst([
        (g["k"], numeric_grad(f, lcn.params["k"])),
        (g["b"], numeric_grad(f, lcn.params["b"])),
        (g["x"], numeric_grad(f, x)),
    ])


def _smoe_instance(rng, weighted: bool, normalization: str = "none"):
    layer = SMoELayer(4, 2, 2, 2, 5, 6, weighted=weighted, use_bias=True, rng=rng,
                      normalization=normalization)
    layer.kernels = layer.kernels.astype(F64)
    layer.bias = rng.standard_normal(layer.bias.shape)
    # well separated logits so a finite-difference step never flips the selection
    order = np.argsort(rng.random((4, 5, 6)), axis=0)
    layer.gate.logits = (order * 1.0 + 0.1 * rng.random((4, 5, 6))).astype(F64)
    layer.gate.grad = np.zeros_like(layer.gate.logits)
    return layer


def check_smoe(rng) -> float:
    """Selected-path gradients: kernels, bias and input (unweighted), plus the
    gate gradient of the weighted variant."""
    worst = 0.0
    for weighted in (False, True):
        layer = _smoe_instance(rng, weighted)
        x = rng.standard_normal((2, 2, 5, 6))
        r = rng.standard_normal((2, 4, 5, 6))

        def f():
            return float(np.sum(layer.forward(x)[0] * r))

        _, cache = layer.forward(x)
        dx, dk, db, dg = layer.backward(r, cache)
        pairs = [
            (dk, numeric_grad(f, layer.kernels)),
            (db, numeric_grad(f, layer.bias)),
            (dx, numeric_grad(f, x)),
        ]
        if weighted:
            pairs.append((dg, numeric_grad(f, layer.gate.logits)))
        worst = max(worst, _worst(pairs))
    return worst


def check_smoe_normalized(rng) -> float:
    """Gate gradient through every score normalization (weighted layers)."""
    worst = 0.0
    for how in ("softmax", "abs", "softmax_abs"):
        layer = _smoe_instance(rng, True, how)
        x = rng.standard_normal((1, 2, 5, 6))
        r = rng.standard_normal((1, 4, 5, 6))

        def f():
            return float(np.sum(layer.forward(x)[0] * r))

        _, cache = layer.forward(x)
        dg = layer.backward(r, cache)[3]
        worst = max(worst, rel_error(dg, numeric_grad(f, layer.gate.logits)))
    return worst


def check_mse(rng) -> float:
    pred = rng.standard_normal((2, 1, 4, 5))
    target = rng.standard_normal((2, 1, 4, 5))
    _, g = mse_loss(pred, target)
    return rel_error(g, numeric_grad(lambda: mse_loss(pred, target)[0], pred))


def check_bce(rng) -> float:
    z = rng.standard_normal((3, 4, 5)) * 3
    labels = rng.random((3, 4, 5))
    _, g = rc_loss(z, labels)
    return rel_error(g, numeric_grad(lambda: rc_loss(z, labels)[0], z))


def check_importance(rng) -> float:
    s = rng.random((2, 3, 4, 5)) + 0.1
    _, g = importance_loss(s)
    return rel_error(g, numeric_grad(lambda: importance_loss(s)[0], s))


def check_load(rng) -> float:
    logits = rng.standard_normal((3, 4, 5))
    routing = top_e_select(logits, 1)
    # the routed threshold is a constant of the loss
    _, g = load_loss(logits, routing, 0.7, batch=4)
    return rel_error(g, numeric_grad(lambda: load_loss(logits, routing, 0.7, batch=4)[0], logits))


def check_spatial_agreement(rng) -> float:
    s = rng.standard_normal((3, 2, 4, 5))
    _, g = spatial_agreement_loss(s)
    return rel_error(g, numeric_grad(lambda: spatial_agreement_loss(s)[0], s))


def check_convnet(rng) -> float:
    net = ConvNet(2, layers=3, width=4, rng=rng)
    net.params = {k: v.astype(F64) + 0.05 * rng.standard_normal(v.shape) for k, v in net.params.items()}
    x = rng.standard_normal((2, 2, 5, 6))
    r = rng.standard_normal((2, 1, 5, 6))

    def f():
        return float(np.sum(net.forward(x)[0] * r))

    _, acts = net.forward(x)
    g = net.backward(r, acts)
    return _worst([(g[k], numeric_grad(f, net.params[k])) for k in net.params])


CHECKS = {
    "conv2d": check_conv2d,
    "lcn": check_lcn,
    "smoe": check_smoe,
    "smoe_normalized": check_smoe_normalized,
    "mse": check_mse,
    "bce_rc": check_bce,
    "importance": check_importance,
    "load": check_load,
    "spatial_agreement": check_spatial_agreement,
    "convnet": check_convnet,
}


def run_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per component."""
    return {name: fn(make_rng(seed + i)) for i, (name, fn) in enumerate(CHECKS.items())}
