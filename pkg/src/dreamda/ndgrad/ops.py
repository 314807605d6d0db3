"""Primitive differentiable operations.

Spatial ops use channels-last layout ``[B, H, W, C]``. Matrix products go
through a fixed-block GEMM so that every output row is bit-identical
regardless of how many other rows share the call; this is what makes
per-sample results independent of batch composition and worker count.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, dropout_forced_off, make_node

GEMM_BLOCK = 64


def _shape_error(op, a, b):
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-stable 2-D matrix product."""
    m, k = a.shape
    if b.shape[0] != k:
        raise _shape_error("matmul", a.shape, b.shape)
    pad = -m % GEMM_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros((pad, k), dtype=a.dtype)])
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    b = np.ascontiguousarray(b)
    for s in range(0, a.shape[0], GEMM_BLOCK):
        np.matmul(a[s:s + GEMM_BLOCK], b, out=out[s:s + GEMM_BLOCK])
    return out[:m]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b, op: str):
    """Lift python/numpy operands to constants and check that shapes broadcast."""
    if not isinstance(a, Tensor):
        a = _const_like(a, b)
    b = _const_like(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None
    return a, b


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


# -- elementwise arithmetic ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # subgradient sign(0) = 0
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * s

    def back(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return make_node(out.astype(x.dtype, copy=False), (x,), back, "silu")


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[M, K] @ [K, N]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)

    def back(g):
        ga = gemm(g, b.data.T) if a.requires_grad else None
        gb = gemm(a.data.T, g) if b.requires_grad else None
        return ga, gb

    return make_node(gemm(a.data, b.data), (a, b), back, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != axis and s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise _shape_error("concat", tensors[0].shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(np.asarray(out, dtype=a.dtype), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


# -- activations and losses ----------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), back, "log_softmax")


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``logits`` [N, C]."""
    labels = np.asarray(labels)
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    per = neg(sum(mul(log_softmax(logits), onehot), axis=1))
    if reduction == "none":
        return per
    if reduction == "sum":
        return sum(per)
    return mean(per)


# -- layers ----------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. ``x`` [B,H,W,Cin], ``w`` [3,3,Cin,Cout]."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or x.shape[3] != w.shape[2]:
        raise _shape_error("conv2d", x.shape, w.shape)
    bsz, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(3) for j in range(3)], axis=3)
    cols = cols.reshape(-1, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out = gemm(cols, wmat).reshape(bsz, h, wd, cout)
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        if b.shape != (cout,):
            raise _shape_error("conv2d bias", b.shape, (cout,))
        out += b.data

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = gemm(cols.T, g2).reshape(w.shape)
        if x.requires_grad:
            gcols = gemm(g2, wmat.T).reshape(bsz, h, wd, 9, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, k, :]
                    k += 1
            gx = gxp[:, 1:-1, 1:-1, :]
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_node(out, parents, back, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    bsz, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2: spatial dims must be even, got {x.shape}")
    out = x.data.reshape(bsz, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return make_node(out, (x,), back, "avg_pool")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    bsz, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g):
        return (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return make_node(out, (x,), back, "upsample")


def affine_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial dims, then scale/shift."""
    if x.ndim != 4 or scale.shape != (x.shape[3],) or shift.shape != (x.shape[3],):
        raise _shape_error("affine_norm", x.shape, scale.shape)
    n = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + shift.data

    def back(g):
        gx = gs = gb = None
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=(0, 1, 2))
        if shift.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        if x.requires_grad:
            gh = g * scale.data
            gx = inv / n * (n * gh - gh.sum(axis=(1, 2), keepdims=True)
                            - xhat * (gh * xhat).sum(axis=(1, 2), keepdims=True))
        return gx, gs, gb

    return make_node(out.astype(x.dtype, copy=False), (x, scale, shift), back, "affine_norm")


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding: index out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_node(table.data[idx], (table,), back, "embedding")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None or dropout_forced_off():
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
