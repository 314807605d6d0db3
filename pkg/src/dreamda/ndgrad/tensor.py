"""Dense tensor with define-by-run reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output cotangent to parent cotangents. The recorded tape is the graph;
``backward`` walks it once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


class NumericalError(FloatingPointError):
    """Raised when a NaN or Inf is detected in a value or gradient."""


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def dropout_forced_off() -> bool:
    return getattr(_state, "no_dropout", False)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def dropout_off():
    """Force every dropout node to the identity (rate 0)."""
    prev = dropout_forced_off()
    _state.no_dropout = True
    try:
        yield
    finally:
        _state.no_dropout = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in ops) ------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = _backprop(self, np.asarray(grad, dtype=self.dtype))
        for node, g in grads.items():
            if node.op == "leaf" and node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Wrap an op result; record it on the tape when any parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
        out.op = op
    else:
        out._parents = ()
        out._backward = None
        out.op = "const" if op != "leaf" else "leaf"
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root: Tensor, seed: np.ndarray) -> dict[Tensor, np.ndarray]:
    if not root.requires_grad:
        raise ValueError("output does not depend on any tracked tensor")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} does not match input shape {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def grad(output: Tensor, wrt) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Parameters that do not participate in the graph get zero gradients.
    Nothing is written to ``.grad``.
    """
    if output.data.size != 1 or output.ndim != 0:
        raise ValueError(f"grad() needs a scalar (shape ()) output, got shape {output.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise ValueError(f"cannot differentiate with respect to untracked tensor {w.name or w!r}")
    if not output.requires_grad:
        return [np.zeros_like(w.data) for w in wrt]
    leaves = _backprop(output, np.ones_like(output.data))
    return [leaves.get(w, np.zeros_like(w.data)) for w in wrt]


def check_finite(x, what: str = "value"):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} detected (shape {arr.shape})")
    return x


def grad_check(fn, params, epsilon: float = 1e-5, n_coords: int = 8, rng=None) -> float:
    """Max relative error between autodiff and central finite differences.

    ``fn`` rebuilds the scalar output from the current parameter values; it
    must be deterministic (dropout is forced off here). Up to ``n_coords``
    coordinates per parameter are sampled.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("grad_check requires real64 parameters")
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with dropout_off():
        analytic = grad(fn(), params)
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            k = min(n_coords, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            gflat = g.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                with no_grad():
                    up = fn().item()
                flat[c] = orig - epsilon
                with no_grad():
                    down = fn().item()
                flat[c] = orig
                fd = (up - down) / (2 * epsilon)
                err = abs(gflat[c] - fd) / (abs(fd) + 1e-8)
                worst = max(worst, err)
    return worst
