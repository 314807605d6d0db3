"""Parameter containers, layers and optimizers on top of the primitive ops."""
from __future__ import annotations

import math

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    """Holds parameters as attributes; sub-modules and lists of them are walked."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def to(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        self.weight = param(np.zeros((n_in, n_out)) if zero else _uniform(rng, n_in, (n_in, n_out)))
        self.bias = param(np.zeros(n_out) if zero else _uniform(rng, n_in, (n_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        shape = (3, 3, c_in, c_out)
        self.weight = param(np.zeros(shape) if zero else _uniform(rng, 9 * c_in, shape))
        self.bias = param(np.zeros(c_out) if zero else _uniform(rng, 9 * c_in, (c_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)


class Norm(Module):
    def __init__(self, channels: int):
        self.scale = param(np.ones(channels))
        self.shift = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.affine_norm(x, self.scale, self.shift)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = param(rng.normal(0.0, 1.0, size=(n, dim)))

    def __call__(self, idx) -> Tensor:
        return ops.embedding(self.table, idx)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


class SGD:
    """Heavy-ball momentum SGD."""

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def make_optimizer(name: str, params, lr: float):
    if name == "sgd":
        return SGD(params, lr=lr, momentum=0.9)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")
