"""Minimal dense tensors with reverse-mode differentiation.

Only the operations the BTNet model needs are provided. Activations use the
N x C x H x W layout. Every op records a closure that maps the upstream
gradient to gradients for its parents; :meth:`Tensor.backward` walks the
recorded graph in reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return scale(self, 1.0, -float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` of every requires-grad tensor feeding this one.

        Gradients accumulate across calls until :meth:`zero_grad`.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topo_order(root: Tensor) -> list:
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    post.reverse()
    return post


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a graph node; ``backward(g)`` returns one gradient per parent."""
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by tensor op")
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        t._parents = tuple(parents)
        t._backward = backward
    return t


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float, offset: float = 0.0) -> Tensor:
    out = x.data * x.data.dtype.type(factor)
    if offset:
        out = out + x.data.dtype.type(offset)
    return make_op(out, (x,), lambda g: (g * x.data.dtype.type(factor),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return make_op(x.data.T, (x,), lambda g: (g.T,))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return make_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape}")
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return make_op(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),))


def l2_normalize(x: Tensor) -> Tensor:
    """Row-wise unit normalization of a 2-D tensor."""
    if x.ndim != 2:
        raise ValueError("l2_normalize expects a 2-D tensor")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norm <= 0):
        raise ValueError("l2_normalize: zero-norm row")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return make_op(y, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return make_op(out, (a, b), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return make_op(out, (logits,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding (im2col + matmul)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: square kernels only")
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cin}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: non-positive output size")

    # channel-major copy so every slice below keeps H x W contiguous
    xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (gt @ cols.T).reshape(weight.shape)
        dcols = (wmat.T @ gt).reshape(c, k, k, n, ho, wo)
        dxt = np.zeros(xt.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        if padding:
            dxt = dxt[:, :, padding:padding + h, padding:padding + w]
        grads = [np.ascontiguousarray(dxt.transpose(1, 0, 2, 3)), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(np.ascontiguousarray(out), parents, backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BNParams:
    """Affine parameters and running statistics for one BN layer."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    tag: str = ""

    @classmethod
    def create(cls, channels: int, tag: str = "", dtype=DEFAULT_DTYPE) -> "BNParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            tag=tag,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self, tag: Optional[str] = None) -> "BNParams":
        return BNParams(
            gamma=Tensor(self.gamma.data.copy(), requires_grad=self.gamma.requires_grad),
            beta=Tensor(self.beta.data.copy(), requires_grad=self.beta.requires_grad),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            tag=self.tag if tag is None else tag,
        )

    def stored_values(self) -> int:
        return 4 * self.channels


def batchnorm(x: Tensor, bank: BNParams, train: bool, update_stats: bool = True) -> Tensor:
    """Batch normalization over N (and H, W for 4-D input).

    In train mode the batch statistics normalize the input and the bank's
    running statistics move by an exponential moving average.
    """
    c = x.shape[1]
    if bank.channels != c:
        raise ValueError(f"batchnorm: bank has {bank.channels} channels, input has {c}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    gamma = bank.gamma.data.reshape(bshape)
    beta = bank.beta.data.reshape(bshape)

    if train:
        m = x.data.size // c
        if x.shape[0] < 2:
            raise ValueError("batchnorm: train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv_std
        out = gamma * xhat + beta
        if update_stats:
            unbiased = var.reshape(c) * (m / max(m - 1, 1))
            bank.running_mean[:] = BN_MOMENTUM * bank.running_mean + (1 - BN_MOMENTUM) * mu.reshape(c)
            bank.running_var[:] = BN_MOMENTUM * bank.running_var + (1 - BN_MOMENTUM) * unbiased

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx.astype(x.dtype), dgamma, dbeta
    else:
        inv_std = (1.0 / np.sqrt(bank.running_var + BN_EPS)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - bank.running_mean.reshape(bshape)) * inv_std
        out = gamma * xhat + beta

        def backward(g):
            return g * gamma * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(out.astype(x.dtype), (x, bank.gamma, bank.beta), backward)


# ---------------------------------------------------------------------------
# initialization


def he_normal(shape: tuple, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
