"""Finite-difference verification of every differentiable op.

The numeric side only ever calls op forwards on float64 inputs (central
differences, h=1e-3); the analytic side runs the same graph through
backward(). Used by the test suite and by `peftlab selftest`.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad

FD_STEP = 1e-3
TOLERANCE = 1e-4


def finite_difference(fn, arrays: list[np.ndarray], h: float = FD_STEP) -> list[np.ndarray]:
    """Central-difference gradients of a scalar-valued fn over float64 arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / max(1, |a|, |n|)."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def _draw(rng, shape, avoid_zero=False):
    x = rng.standard_normal(shape)
    if avoid_zero:
        x = np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)
    return x


def _projected_loss(out: ad.Tensor, proj: np.ndarray) -> ad.Tensor:
    return ad.total_sum(ad.mul(out, ad.Tensor(proj)))


def _case(rng, name):
    """Return (inputs, build) where build maps leaf Tensors to a scalar loss."""
    if name == "add":
        a, b = _draw(rng, (3, 4)), _draw(rng, (4,))
        proj = _draw(rng, (3, 4))
        return [a, b], lambda ts: _projected_loss(ad.add(ts[0], ts[1]), proj)
    if name == "mul":
        a, b = _draw(rng, (2, 5)), _draw(rng, (2, 5))
        proj = _draw(rng, (2, 5))
        return [a, b], lambda ts: _projected_loss(ad.mul(ts[0], ts[1]), proj)
    if name == "matmul":
        a, b = _draw(rng, (2, 3, 4)), _draw(rng, (4, 5))
        proj = _draw(rng, (2, 3, 5))
        return [a, b], lambda ts: _projected_loss(ad.matmul(ts[0], ts[1]), proj)
    if name == "relu":
        x = _draw(rng, (4, 6), avoid_zero=True)
        proj = _draw(rng, (4, 6))
        return [x], lambda ts: _projected_loss(ad.relu(ts[0]), proj)
    if name == "gelu":
        x = _draw(rng, (4, 6))
        proj = _draw(rng, (4, 6))
        return [x], lambda ts: _projected_loss(ad.gelu(ts[0]), proj)
    if name == "layer_norm":
        x, g, b = _draw(rng, (3, 8)), _draw(rng, (8,)), _draw(rng, (8,))
        proj = _draw(rng, (3, 8))
        return [x, g, b], lambda ts: _projected_loss(ad.layer_norm(ts[0], ts[1], ts[2]), proj)
    if name == "softmax":
        x = _draw(rng, (3, 7))
        proj = _draw(rng, (3, 7))
        return [x], lambda ts: _projected_loss(ad.softmax(ts[0]), proj)
    if name == "linear":
        x, w, b = _draw(rng, (3, 4)), _draw(rng, (4, 5)), _draw(rng, (5,))
        proj = _draw(rng, (3, 5))
        return [x, w, b], lambda ts: _projected_loss(ad.linear(ts[0], ts[1], ts[2]), proj)
    if name == "upsample_nearest":
        x = _draw(rng, (2, 3, 3, 2))
        proj = _draw(rng, (2, 6, 6, 2))
        return [x], lambda ts: _projected_loss(ad.upsample_nearest(ts[0], 2), proj)
    if name == "scaled_dot_attention":
        q, k, v = (_draw(rng, (2, 5, 6)) for _ in range(3))
        proj = _draw(rng, (2, 5, 6))
        return [q, k, v], lambda ts: _projected_loss(
            ad.scaled_dot_attention(ts[0], ts[1], ts[2], num_heads=2), proj)
    if name == "multi_head_attention":
        x = _draw(rng, (2, 4, 6))
        ws = [_draw(rng, (6, 6)) for _ in range(4)]
        bs = [_draw(rng, (6,)) for _ in range(4)]
        proj = _draw(rng, (2, 4, 6))
        arrays = [x, ws[0], bs[0], ws[1], bs[1], ws[2], bs[2], ws[3], bs[3]]
        return arrays, lambda ts: _projected_loss(
            ad.multi_head_attention(*ts, num_heads=2), proj)
    if name == "softmax_cross_entropy":
        x = _draw(rng, (6, 4))
        labels = rng.integers(0, 4, size=(6,))
        return [x], lambda ts: ad.softmax_cross_entropy(ts[0], labels)
    if name == "mean_squared_error":
        x = _draw(rng, (3, 5))
        target = _draw(rng, (3, 5))
        return [x], lambda ts: ad.mean_squared_error(ts[0], target)
    raise KeyError(name)


CHECKED_OPS = (
    "add", "mul", "matmul", "relu", "gelu", "layer_norm", "softmax",
    "linear", "upsample_nearest", "scaled_dot_attention",
    "multi_head_attention", "softmax_cross_entropy", "mean_squared_error",
)


def check_op(name: str, draws: int = 20, seed: int = 0) -> float:
    """Max relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    worst = 0.0
    for _ in range(draws):
        arrays, build = _case(rng, name)
        leaves = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        build(leaves).backward()

        def forward():
            return float(build([ad.Tensor(a) for a in arrays]).data)

        numeric = finite_difference(forward, arrays)
        for leaf, num in zip(leaves, numeric):
            worst = max(worst, relative_error(leaf.grad, num))
    return worst


def check_all_ops(draws: int = 20, seed: int = 0) -> dict[str, float]:
    return {name: check_op(name, draws=draws, seed=seed) for name in CHECKED_OPS}
