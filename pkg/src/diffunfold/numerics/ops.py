"""Recorded operations.

Every function accepts ``Var`` or plain arrays and returns a ``Var``.  The
closed set here is what the denoiser, weight MLPs and losses need; linear
measurement maps enter through :func:`linear_map` as constants with
respect to the parameters.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Var, as_var, value_of


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value + b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return Var(a.value - b.value, (a, b),
               lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return Var(av * bv, (a, b),
               lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                          _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return Var(out, (a, b),
               lambda g: (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                          _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None))


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return Var(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, (a,), lambda g: (g * out,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Var:
    a = as_var(a)
    av = a.value
    out = np.logaddexp(0.0, av).astype(av.dtype, copy=False)
    return Var(out, (a,), lambda g: (g * _sigmoid(av),))


def silu(a) -> Var:
    a = as_var(a)
    av = a.value
    s = _sigmoid(av)
    return Var(av * s, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def clip(a, lo: float, hi: float) -> Var:
    """Hard clamp; the gradient is zero where the clamp is active."""
    a = as_var(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return Var(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape -----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return Var(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(items: Sequence, axis: int = 0) -> Var:
    vs = [as_var(x) for x in items]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([v.value for v in vs], axis=axis), vs,
               lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Var:
    """``a @ b`` for 2-D operands or a batch ``(..., n) @ (n, m)``."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = av.reshape(-1, av.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Var(av @ bv, (a, b), bw)


def linear_map(a, fwd: Callable[[np.ndarray], np.ndarray],
               adj: Callable[[np.ndarray], np.ndarray]) -> Var:
    """Apply a fixed linear map with known adjoint (no parameters)."""
    a = as_var(a)
    return Var(fwd(a.value), (a,), lambda g: (adj(g),))


# -- image layers -----------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((c, k * k, b, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i * k + j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, b * h * w)


def conv2d(x, weight, bias=None) -> Var:
    """Zero-padded 'same' 2-D convolution (cross-correlation), odd kernel.

    x: (B, C, H, W); weight: (O, C, k, k); bias: (O,) or None.
    """
    x, weight = as_var(x), as_var(weight)
    xv, wv = x.value, weight.value
    b, c, h, w = xv.shape
    o, c2, k, k2 = wv.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: x {xv.shape}, weight {wv.shape}")
    p = k // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
    cols = _im2col(xp, k, h, w)
    w2 = wv.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, b, h, w).transpose(1, 0, 2, 3)
    parents = [x, weight]
    if bias is not None:
        bias = as_var(bias)
        out = out + bias.value.reshape(1, o, 1, 1)
        parents.append(bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, b * h * w)
        gw = (g2 @ cols.T).reshape(wv.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k * k, b, h, w)
            gxp = np.zeros((c, b, h + 2 * p, w + 2 * p), dtype=dcols.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + w] += dcols[:, i * k + j]
            gx = gxp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return Var(out, parents, bw)


def avg_pool2(x) -> Var:
    """2x2 non-overlapping mean over the last two axes."""
    x = as_var(x)
    xv = x.value
    *lead, h, w = xv.shape
    out = xv.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Var(out, (x,), bw)


def upsample2(x) -> Var:
    """Nearest-neighbour 2x upsampling over the last two axes."""
    x = as_var(x)
    xv = x.value
    out = np.repeat(np.repeat(xv, 2, axis=-2), 2, axis=-1)

    def bw(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1)),)

    return Var(out, (x,), bw)


def per_example_sum_squares(a) -> Var:
    """Sum of squares over all but the leading axis: shape (B,)."""
    a = as_var(a)
    av = a.value
    axes = tuple(range(1, av.ndim))
    return Var((av * av).sum(axis=axes), (a,),
               lambda g: (2.0 * av * g.reshape((-1,) + (1,) * len(axes)),))


__all__ = [
    "add", "sub", "mul", "div", "neg", "square", "exp", "tanh", "softplus",
    "silu", "clip", "sum", "mean", "reshape", "concat", "matmul", "linear_map",
    "conv2d", "avg_pool2", "upsample2", "per_example_sum_squares", "value_of",
]
