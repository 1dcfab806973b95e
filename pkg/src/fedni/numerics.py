"""Dense kernels, a small reverse-mode tape, optimizers and layers.

Everything here works on float64 numpy arrays. The differentiation core only
covers the operations the generator, discriminator and classifier need; it is
not a general autodiff library.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ELU_ALPHA = 1.0
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class Tensor:
    """A value on the differentiation tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar. Leaf parameter grads are reset first."""
        if self.value.size != 1:
            raise DimensionError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        for node in order:
            if isinstance(node, Param):
                node.grad = np.zeros_like(node.value)
            else:
                node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Trainable tensor carrying its own Adam moments."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, value):
        super().__init__(value, requires_grad=True)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[Tensor], backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=req, parents=tuple(parents) if req else (),
                  backward=backward if req else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _make(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))
    return _make(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)
    return _make(a.value @ b.value, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value ** 2, (a,), lambda g: a._accumulate(2.0 * a.value * g))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: a._accumulate(g / a.value))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))
    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: a._accumulate(g * mask))


def elu(a, alpha: float = ELU_ALPHA) -> Tensor:
    a = as_tensor(a)
    neg = a.value <= 0
    ex = np.expm1(np.minimum(a.value, 0.0))
    out = np.where(neg, alpha * ex, a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * np.where(neg, alpha * (ex + 1.0), 1.0)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - out ** 2)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow."""
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.value)
    return _make(out, (a,), lambda g: a._accumulate(g * (1.0 - _sigmoid(a.value))))


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        a._accumulate(out * (g - (g * out).sum(axis=1, keepdims=True)))
    return _make(out, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: a._accumulate(g - sm * g.sum(axis=1, keepdims=True)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: a._accumulate(g * inside))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, piece in zip(parts, np.split(g, cuts, axis=axis)):
            if p.requires_grad:
                p._accumulate(piece)
    return _make(np.concatenate([p.value for p in parts], axis=axis), parts, bw)


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        a._accumulate(full)
    return _make(a.value[idx], (a,), bw)


def column(a, j: int) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.value)
        full[:, j] = g
        a._accumulate(full)
    return _make(a.value[:, j], (a,), bw)


def activate(x: Tensor, name: str | None) -> Tensor:
    if name in (None, "identity", "linear"):
        return x
    fn = {"relu": relu, "elu": elu, "tanh": tanh, "sigmoid": sigmoid}.get(name)
    if fn is None:
        raise ValueError(f"unknown activation {name!r}")
    return fn(x)


# ------------------------------------------------------------ graph kernels

def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^{-1/2} A D^{-1/2} with D the row sums of A (self-loops already in A)."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=1)
    inv = np.zeros_like(deg)
    np.divide(1.0, np.sqrt(deg), out=inv, where=deg > 0)
    return inv[:, None] * A * inv[None, :]


def _check_finite(*arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in input")


def gcn_layer_forward(Z, A_norm: np.ndarray, W: Tensor, activation: str | None = None) -> Tensor:
    """activation(A_norm @ Z @ W), recorded on the tape."""
    Z = as_tensor(Z)
    n = Z.shape[0]
    if A_norm.shape != (n, n):
        raise DimensionError(f"A_norm is {A_norm.shape}, expected {(n, n)}")
    if Z.shape[1] != W.shape[0]:
        raise DimensionError(f"feature dim {Z.shape[1]} does not match weight rows {W.shape[0]}")
    _check_finite(Z.value, A_norm, W.value)
    # (A Z) W is cheaper when d_in < d_out
    if Z.shape[1] <= W.shape[1]:
        out = matmul(matmul(Tensor(A_norm), Z), W)
    else:
        out = matmul(Tensor(A_norm), matmul(Z, W))
    return activate(out, activation)


def spectral_normalize(W: np.ndarray, u: np.ndarray, power_iters: int = 1
                       ) -> tuple[np.ndarray, np.ndarray, float, bool]:
    """Divide ``W`` (in x out) by a power-iteration estimate of its top singular value.

    ``u`` is the persistent estimate over the output axis and is returned updated.
    Returns ``(W_sn, u, sigma, degenerate)``.
    """
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    v = None
    for _ in range(power_iters):
        v = W @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return W.copy(), u, 0.0, True
        v = v / nv
        u_new = W.T @ v
        nu = np.linalg.norm(u_new)
        if nu == 0.0:
            return W.copy(), u, 0.0, True
        u = u_new / nu
    sigma = float(v @ W @ u)
    if not sigma > 0.0:
        return W.copy(), u, 0.0, True
    return W / sigma, u, sigma, False


# --------------------------------------------------------------- optimizers

def adam_step(params: Iterable[Param], lr: float) -> None:
    for p in params:
        p.step_count += 1
        g = p.grad
        p.adam_m = ADAM_BETA1 * p.adam_m + (1.0 - ADAM_BETA1) * g
        p.adam_v = ADAM_BETA2 * p.adam_v + (1.0 - ADAM_BETA2) * g * g
        m_hat = p.adam_m / (1.0 - ADAM_BETA1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - ADAM_BETA2 ** p.step_count)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        assert np.all(np.isfinite(p.value)), "Adam produced a non-finite parameter"


def sgd_step(params: Iterable[Param], lr: float) -> None:
    for p in params:
        p.step_count += 1
        p.value = p.value - lr * p.grad


# ------------------------------------------------------------------- layers

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Module:
    """Ordered parameters and buffers, addressable by dotted name."""

    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Param):
                out.append((prefix + name, val))
            elif isinstance(val, Module):
                out.extend(val.named_params(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, val in vars(self).items():
            if isinstance(val, Module):
                out.extend(val.named_buffers(prefix + name + "."))
        for name in getattr(self, "_buffers", ()):
            out.append((prefix + name, getattr(self, name)))
        return out

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        obj = self
        for part in path:
            obj = getattr(obj, part)
        setattr(obj, leaf, np.array(value, dtype=np.float64))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Param(glorot_uniform(rng, in_dim, out_dim))
        self.b = Param(np.zeros((1, out_dim)))

    def __call__(self, x) -> Tensor:
        return matmul(x, self.W) + self.b


class GraphConv(Module):
    """Graph convolution without bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Param(glorot_uniform(rng, in_dim, out_dim))

    def __call__(self, Z, A_norm: np.ndarray, activation: str | None = None) -> Tensor:
        return gcn_layer_forward(Z, A_norm, self.W, activation)


class SNLinear(Module):
    """Linear layer whose weight is spectrally normalized on every forward.

    The singular value estimate is treated as a constant on the tape.
    """

    _buffers = ("u",)

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 power_iters: int = 1):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.W = Param(glorot_uniform(rng, in_dim, out_dim))
        self.b = Param(np.zeros((1, out_dim)))
        u = rng.normal(size=out_dim)
        self.u = u / np.linalg.norm(u)
        self.power_iters = power_iters
        self.frozen_sigma: float | None = None
        self.degenerate = False
        self.last_sigma = 1.0

    def sigma(self, power_iters: int | None = None) -> float:
        if self.frozen_sigma is not None:
            return self.frozen_sigma
        _, self.u, sigma, self.degenerate = spectral_normalize(
            self.W.value, self.u, power_iters or self.power_iters)
        self.last_sigma = sigma if not self.degenerate else 1.0
        return self.last_sigma

    def normalized_weight(self, power_iters: int | None = None) -> np.ndarray:
        return self.W.value / self.sigma(power_iters)

    def __call__(self, x) -> Tensor:
        s = self.sigma()
        return matmul(x, self.W * (1.0 / s)) + self.b


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, dim: int):
        self.dim = dim
        self.gamma = Param(np.ones((1, dim)))
        self.beta = Param(np.zeros((1, dim)))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.fell_back = False

    def __call__(self, x, training: bool) -> Tensor:
        return batch_norm_forward(x, self, training)


def batch_norm_forward(Z, bn: BatchNorm, training: bool) -> Tensor:
    """Normalize columns of Z; training mode uses batch moments and updates running stats."""
    Z = as_tensor(Z)
    if Z.shape[1] != bn.dim:
        raise DimensionError(f"batch norm over {bn.dim} features got {Z.shape[1]}")
    n = Z.shape[0]
    bn.fell_back = training and n < 2
    if bn.fell_back:
        logger.debug("batch of size %d in training mode; using running statistics", n)
    if training and not bn.fell_back:
        mu = Z.value.mean(axis=0)
        var = Z.value.var(axis=0)
        bn.running_mean = (1 - BN_MOMENTUM) * bn.running_mean + BN_MOMENTUM * mu
        bn.running_var = (1 - BN_MOMENTUM) * bn.running_var + BN_MOMENTUM * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (Z.value - mu) * inv

        def bw(g):
            dz = inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))
            Z._accumulate(dz)
        normed = _make(xhat, (Z,), bw)
    else:
        inv = 1.0 / np.sqrt(np.maximum(bn.running_var, 0.0) + BN_EPS)
        normed = (Z - bn.running_mean) * inv
    return normed * bn.gamma + bn.beta


# ------------------------------------------------------------ grad checking

def finite_difference_grad(loss_fn: Callable[[], float], param: np.ndarray,
                           h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``param`` (edited in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        up = loss_fn()
        param[idx] = orig - h
        down = loss_fn()
        param[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad
