"""Dense float64 tensors with reverse-mode automatic differentiation.

A define-by-run tape: every op returns a new Tensor that remembers its
parents and a closure distributing the output gradient to them.  Calling
``backward`` on a scalar loss walks the graph once in reverse topological
order.  Gradients accumulate (+=) until ``zero_grad`` is called, so shared
subexpressions and repeated backward calls behave like sums.

Everything is float64.  The graph is rebuilt each step, which keeps
structural pruning trivial: between steps the weight arrays can be sliced
freely and the next forward simply records the new topology.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

GELU_CUBIC_COEFF = 0.044715  # tanh-form gelu: 0.5*x*(1+tanh(sqrt(2/pi)*(x + c*x^3)))
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus an optional gradient and a place in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    """Create an op output, recording parents only when a grad path exists."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- core ops ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out_data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _node(out_data, (a, b), grad_fn)


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None
    out_data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None
    out_data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * (x.data > 0.0))

    return _node(out_data, (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form with cubic coefficient 0.044715."""
    x = _as_tensor(x)
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + GELU_CUBIC_COEFF * v**3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def grad_fn(g):
        if x.requires_grad:
            d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC_COEFF * v**2)
            local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner
            x.accumulate_grad(g * local)

    return _node(out_data, (x,), grad_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ContractError(f"unknown activation kind: {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if x.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            x.accumulate_grad(p * (g - dot))

    return _node(p, (x,), grad_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against softmax(logits).

    Stabilized by max-subtraction; gradient is (softmax - onehot) / batch.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross entropy expects [batch, classes], got {logits.data.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise IndexError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(g):
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate_grad(g * p / n)

    return _node(np.float64(loss), (logits,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=lead))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=lead))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gh - m1 - xhat * m2))

    return _node(out_data, (x, gain, bias), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise IndexError(
            f"token id out of range [0, {table.data.shape[0]})"
        )
    out_data = table.data[ids]

    def grad_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(gt)

    return _node(out_data, (table,), grad_fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if x.requires_grad:
            if axis is None:
                x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                x.accumulate_grad(np.broadcast_to(gg, x.data.shape).copy())

    return _node(out_data, (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    out = tsum(x, axis=axis, keepdims=keepdims)
    return mul(out, 1.0 / count)


def tabs(x: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient at 0 is taken as 0."""
    x = _as_tensor(x)
    out_data = np.abs(x.data)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.sign(x.data))

    return _node(out_data, (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out_data = x.data.reshape(shape)

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _node(out_data, (x,), grad_fn)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inverse))

    return _node(out_data, (x,), grad_fn)


# -- backward ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = _topo_order(loss)
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is not None:
            node._grad_fn(node.grad)


def _topo_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
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
            if id(p) not in seen and p._grad_fn is not None:
                stack.append((p, False))
    return order


def reachable_tensors(root: Tensor) -> list:
    """Every tensor reachable from ``root`` through parent links, root included."""
    out: list = []
    seen: set = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream; equal seeds yield bit-identical draws."""
    return np.random.default_rng(seed)
