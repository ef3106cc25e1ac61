"""Array-level reverse-mode differentiation and the two-headed MLP.

`Tensor` records every operation applied to it so that `backward()` can
propagate adjoints through the graph. Operations broadcast like numpy and
`matmul` follows ``np.matmul`` stacking rules, which lets a stack of sampled
parameter vectors run through the network in a single pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""

    def __init__(self, message: str, node: "Tensor | None" = None, index: int | None = None):
        super().__init__(message)
        self.node = node
        self.index = index


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.value if isinstance(x, Tensor) else x


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100  # so ndarray (op) Tensor defers to Tensor

    def __init__(self, value, parents: tuple = (), backward: Callable | None = None,
                 op: str = "const"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self.op = op

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # -- graph traversal ---------------------------------------------------
    def topo(self) -> list["Tensor"]:
        order, seen, stack = [], set(), [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed=None) -> None:
        order = self.topo()
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, float)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other):
        o = _as_tensor(other)
        a, b = self.value.shape, o.value.shape
        return Tensor(self.value + o.value, (self, o),
                      lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        o = _as_tensor(other)
        a, b = self.value, o.value
        return Tensor(a * b, (self, o),
                      lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
                      "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_tensor(other)
        a, b = self.value, o.value
        return Tensor(a / b, (self, o),
                      lambda g: (_unbroadcast(g / b, a.shape),
                                 _unbroadcast(-g * a / (b * b), b.shape)), "div")

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, k: float):
        a = self.value
        return Tensor(a ** k, (self,), lambda g: (g * k * a ** (k - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        shape = self.value.shape

        def back(g):
            out = np.zeros(shape)
            if _advanced(idx):
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return (out,)
        return Tensor(self.value[idx], (self,), back, "getitem")

    def reshape(self, *shape):
        old = self.value.shape
        return Tensor(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)
        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(not (isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None)
               for i in items)


# ---------------------------------------------------------------------------
# functional ops (accept Tensor or ndarray; ndarray in -> ndarray out)

def matmul(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.matmul(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value

    def back(g):
        if av.ndim == 1:
            ga = (g[..., None, :] @ np.swapaxes(bv, -1, -2))[..., 0, :]
        else:
            ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        if bv.ndim == 1:
            gb = (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0] if av.ndim > 1 else av * g
        else:
            gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)
    return Tensor(np.matmul(av, bv), (a, b), back, "matmul")


def relu(x):
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    mask = x.value > 0
    return Tensor(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def _softplus_np(v):
    v = np.asarray(v, dtype=float)
    big = v > 30.0
    # x + log1p(exp(-x)) above the threshold, log1p(exp(x)) below
    return np.where(big, v + np.log1p(np.exp(-np.where(big, v, 0.0))),
                    np.log1p(np.exp(np.minimum(v, 30.0))))


def sigmoid(x):
    if isinstance(x, Tensor):
        s = sigmoid(x.value)
        return Tensor(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    if isinstance(x, Tensor):
        s = sigmoid(x.value)
        return Tensor(_softplus_np(x.value), (x,), lambda g: (g * s,), "softplus")
    out = _softplus_np(x)
    return float(out) if np.ndim(out) == 0 and not isinstance(x, np.ndarray) else out


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y + np.log(-np.expm1(-y)), np.log(np.expm1(y)))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    v = np.exp(x.value)
    return Tensor(v, (x,), lambda g: (g * v,), "exp")


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    v = x.value
    return Tensor(np.log(v), (x,), lambda g: (g / v,), "log")


def absolute(x):
    if not isinstance(x, Tensor):
        return np.abs(x)
    sgn = np.sign(x.value)
    return Tensor(np.abs(x.value), (x,), lambda g: (g * sgn,), "abs")


def square(x):
    if not isinstance(x, Tensor):
        return np.square(x)
    v = x.value
    return Tensor(v * v, (x,), lambda g: (2.0 * g * v,), "square")


def maximum(x, floor: float):
    """Elementwise max against a constant; gradient passes where x > floor."""
    if not isinstance(x, Tensor):
        return np.maximum(x, floor)
    mask = x.value > floor
    return Tensor(np.where(mask, x.value, floor), (x,), lambda g: (g * mask,), "maximum")


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.where(cond, a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.value.shape, b.value.shape
    return Tensor(np.where(cond, a.value, b.value), (a, b),
                  lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                             _unbroadcast(np.where(cond, 0.0, g), sb)), "where")


def concat(parts: Sequence, axis: int = -1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([np.asarray(p, float) for p in parts], axis=axis)
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back,
                  "concat")


def broadcast_to(x, shape):
    if not isinstance(x, Tensor):
        return np.broadcast_to(x, shape)
    old = x.value.shape
    return Tensor(np.broadcast_to(x.value, shape), (x,),
                  lambda g: (_unbroadcast(g, old),), "broadcast")


# ---------------------------------------------------------------------------
# gradient driver

def _first_nonfinite(out: Tensor) -> tuple[int, Tensor] | None:
    for i, node in enumerate(out.topo()):
        if not np.all(np.isfinite(node.value)):
            return i, node
    return None


def value_and_grad(loss: Callable, at) -> tuple[float, np.ndarray]:
    """Evaluate ``loss(Tensor(at))`` and its gradient with respect to `at`."""
    at = np.array(at, dtype=float)
    leaf = Tensor(at, op="param")
    out = loss(leaf)
    if not isinstance(out, Tensor):
        val = float(out)
        if not math.isfinite(val):
            raise NonFiniteError(f"loss is {val}")
        return val, np.zeros_like(at)
    if out.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {out.value.shape}")
    val = float(out.value)
    if not math.isfinite(val):
        hit = _first_nonfinite(out)
        i, node = hit if hit else (None, out)
        raise NonFiniteError(f"non-finite value first produced by node #{i} ({node.op})",
                             node, i)
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(at)
    return val, np.asarray(g, dtype=float).reshape(at.shape)


def grad(loss: Callable, at) -> np.ndarray:
    return value_and_grad(loss, at)[1]


def finite_difference(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences of a plain numpy scalar function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class NetArch:
    input_dim: int
    hidden: tuple = (110, 110)
    state_dim: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden:
            raise ValueError("at least one hidden layer is required")
        if self.input_dim < 1 or self.state_dim < 1 or min(self.hidden) < 1:
            raise ValueError("all layer widths must be >= 1")

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden, 2 * self.state_dim)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "state_dim": self.state_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "NetArch":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d.get("state_dim", 3)))


def init_params(arch: NetArch, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    w = arch.widths
    chunks = []
    for fi, fo in zip(w[:-1], w[1:]):
        bound = 1.0 / math.sqrt(fi)
        chunks.append(rng.uniform(-bound, bound, fi * fo))
        chunks.append(rng.uniform(-bound, bound, fo))
    return np.concatenate(chunks)


def unpack_params(params, arch: NetArch) -> list:
    """Split a flat vector (or a stack of them) into per-layer (W, b)."""
    L = arch.n_params
    if _value(params).shape[-1] != L:
        raise ValueError(f"parameter vector has length {_value(params).shape[-1]}, "
                         f"architecture needs {L}")
    lead = _value(params).shape[:-1]
    layers, off = [], 0
    w = arch.widths
    for fi, fo in zip(w[:-1], w[1:]):
        W = params[..., off:off + fi * fo].reshape(*lead, fi, fo)
        off += fi * fo
        b = params[..., off:off + fo].reshape(*lead, *([1] if lead else []), fo)
        off += fo
        layers.append((W, b))
    return layers


def mlp_apply(layers: list, x):
    """Raw network output (mean half followed by pre-softplus variance half)."""
    h = x
    for W, b in layers[:-1]:
        h = relu(matmul(h, W) + b)
    W, b = layers[-1]
    return matmul(h, W) + b


VAR_TINY = np.finfo(float).tiny


def variance_head(raw):
    """softplus, kept strictly positive where it would underflow to zero."""
    return maximum(softplus(raw), VAR_TINY)


def split_heads(out, state_dim: int):
    return out[..., :state_dim], variance_head(out[..., state_dim:])


def mlp_forward(params, arch: NetArch, x):
    """Return (mu, var) for input `x`.

    `params` may be a single vector of length L or a stack (S, L); `x` may be a
    single input, a batch (B, input_dim) or a per-sample batch (S, B, input_dim).
    """
    xv = _value(x)
    if np.shape(xv)[-1] != arch.input_dim:
        raise ValueError(f"input has {np.shape(xv)[-1]} features, architecture expects "
                         f"{arch.input_dim}")
    return split_heads(mlp_apply(unpack_params(params, arch), x), arch.state_dim)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params, dtype=float), np.zeros_like(params, dtype=float))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float):
    if np.shape(params) != np.shape(grads) or np.shape(params) != state.m.shape:
        raise ValueError("parameter, gradient and optimizer state shapes differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


@dataclass(frozen=True)
class ExpDecay:
    """lr(step) = lr0 * decay ** (step / decay_steps)."""
    lr0: float = 1e-3
    decay: float = 1.0
    decay_steps: float = 1000.0

    def __call__(self, step: float) -> float:
        return self.lr0 * self.decay ** (step / self.decay_steps)
