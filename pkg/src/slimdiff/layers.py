"""Small layer toolkit with explicit backward passes.

Each :class:`Module` caches what its ``forward`` needs and exposes a
``backward(dy)`` that accumulates parameter gradients into ``self.grads`` and
returns the gradient with respect to its input. A module instance must be run
forward once per backward; reuse within a graph goes through the functional
primitives in :mod:`slimdiff.tensorcore` instead.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .tensorcore import ConvKernel, NonFiniteError, conv2d, conv2d_backward, sigmoid, silu_grad

_TALLY: list[int] = []


@contextlib.contextmanager
def mac_tally():
    """Count multiply-accumulates of conv/attention forwards run inside the block.

    Yields a one-element list whose entry is the running total.
    """
    _TALLY.append(0)
    box = [0]
    try:
        yield box
    finally:
        box[0] = _TALLY.pop()


def tally(n: int) -> None:
    if _TALLY:
        _TALLY[-1] += int(n)


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False

    # -- parameters -------------------------------------------------------
    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def children(self):
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", trainable_only: bool = False):
        if trainable_only and self.frozen:
            return
        for k, v in self.params.items():
            yield prefix + k, v, self.grads[k]
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.", trainable_only)

    def num_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def freeze(self, flag: bool = True) -> "Module":
        self.frozen = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.copy() for k, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = {k: p for k, p, _ in self.named_parameters()}
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            if k in own:
                if own[k].shape != v.shape:
                    raise ValueError(f"{k}: shape {v.shape} != {own[k].shape}")
                own[k][...] = v

    def astype(self, dtype) -> "Module":
        for mod in self.modules():
            for k in list(mod.params):
                mod.params[k] = mod.params[k].astype(dtype)
                mod.grads[k] = np.zeros_like(mod.params[k])
        return self

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def lecun_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k=3, stride: int = 1, padding=None,
                 groups: int = 1, bias: bool = True, rng=None, init: str = "lecun"):
        super().__init__()
        kh, kw = (k, k) if isinstance(k, int) else k
        if padding is None:
            padding = (kh // 2, kw // 2)
        if c_in % groups or c_out % groups:
            raise ValueError("groups must divide both channel counts")
        self.stride, self.padding, self.groups = stride, padding, groups
        shape = (c_out, c_in // groups, kh, kw)
        fan_in = (c_in // groups) * kh * kw
        if init == "zero":
            w = np.zeros(shape)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = lecun_normal(rng, shape, fan_in)
        self.add_param("weight", w)
        if bias:
            self.add_param("bias", np.zeros(c_out))

    @property
    def kernel(self) -> ConvKernel:
        return ConvKernel(self.params["weight"], self.params.get("bias"), self.groups,
                          self.stride, self.padding)

    def forward(self, x):
        self._x = x
        self._cache = {}
        y = conv2d(x, self.kernel, self._cache)
        if _TALLY:
            w = self.params["weight"]
            tally(y.size * w.shape[1] * w.shape[2] * w.shape[3])
        return y

    def backward(self, dy):
        dx, dw, db = conv2d_backward(dy, self._x, self.kernel, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class Linear(Module):
    """``y = x @ W + b`` over the last axis."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng=None, init: str = "lecun"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = np.zeros((d_in, d_out)) if init == "zero" else lecun_normal(rng, (d_in, d_out), d_in)
        self.add_param("weight", w)
        if bias:
            self.add_param("bias", np.zeros(d_out))

    def forward(self, x):
        self._x = x
        y = x @ self.params["weight"]
        tally(y.size * x.shape[-1])
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        x2 = self._x.reshape(-1, self._x.shape[-1])
        d2 = dy.reshape(-1, dy.shape[-1])
        self.grads["weight"] += x2.T @ d2
        if "bias" in self.params:
            self.grads["bias"] += d2.sum(axis=0)
        return dy @ self.params["weight"].T


class SiLU(Module):
    def forward(self, x):
        self._x = x
        self._s = sigmoid(x)
        return x * self._s

    def backward(self, dy):
        return dy * silu_grad(self._x, self._s)


class Identity(Module):
    def forward(self, x):
        return x

    def backward(self, dy):
        return dy


class Sigmoid(Module):
    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def make_activation(name: str) -> Module:
    if name == "silu":
        return SiLU()
    if name == "identity":
        return Identity()
    raise ValueError(f"unknown activation {name!r}")


def cosine_lr(base: float, it: int, total: int, warmup: int = 0) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if warmup and it <= warmup:
        return base * it / warmup
    frac = (it - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class SGD:
    """Gradient descent with (heavy-ball) momentum over a set of modules."""

    def __init__(self, modules, lr: float, momentum: float = 0.9, clip: float | None = None):
        self.modules = list(modules)
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self._vel: dict[int, np.ndarray] = {}

    def _trainable(self):
        for m in self.modules:
            for _, p, g in m.named_parameters(trainable_only=True):
                yield p, g

    def zero_grad(self) -> None:
        for m in self.modules:
            m.zero_grad()

    def grad_norm(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for _, g in self._trainable())))

    def step(self) -> None:
        """Raises :class:`NonFiniteError` instead of applying an overflowed gradient."""
        scale = 1.0
        if self.clip is not None:
            norm = self.grad_norm()
            if not math.isfinite(norm):
                raise NonFiniteError(f"gradient norm is {norm}")
            if norm > self.clip:
                scale = self.clip / norm
        for p, g in self._trainable():
            v = self._vel.get(id(p))
            if v is None:
                v = self._vel[id(p)] = np.zeros_like(p)
            v *= self.momentum
            v += scale * g
            p -= self.lr * v
