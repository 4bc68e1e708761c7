"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every learnable computation in the package is expressed through the Tensor
class defined here.  Forward evaluation builds a DAG of nodes; backward()
walks it once in reverse topological order and accumulates gradients into
the ``grad`` buffers of every reachable tensor that requires them.

Conventions:
  * all data is float64; inputs are coerced on construction
  * tensors are immutable after construction except for ``grad`` buffers
    (and parameter data, which optimizers update between graphs)
  * gradients accumulate across backward calls until ``zero_grad``
  * elementwise binary ops broadcast only over scalars, trailing row
    vectors, and explicit size-1 axes; the backward pass sums gradients
    over broadcast axes
  * matmul operates on the last two axes; leading axes follow the same
    size-1 broadcasting rule (used for stacked per-series weight blocks)
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_GRAD_ENABLED = [True]
_DEBUG_CHECKS = [False]


def set_debug(enabled: bool) -> None:
    """Enable per-op NaN/Inf detection (raises NonFiniteError)."""
    _DEBUG_CHECKS[0] = bool(enabled)


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure evaluation)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def _check_finite(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced (debug checks enabled)")


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        if _DEBUG_CHECKS[0]:
            _check_finite(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    # -- method forms of common ops -------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)

    def relu(self):
        return relu(self)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swap_last(self):
        """Transpose the last two axes (batched matrix transpose)."""
        return transpose(self, _swap_axes(self.ndim))


class Parameter(Tensor):
    """A named learnable tensor; always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents) -> Tensor:
    """Build a graph node; collapses to a constant when tracking is off."""
    if _DEBUG_CHECKS[0]:
        _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out.requires_grad = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    # `owned` marks freshly computed arrays the node may keep without
    # copying; views of out.grad and shared buffers must pass owned=False
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned else np.array(g)
    else:
        t.grad += g


def _accumulate_into(t: Tensor, index, g: np.ndarray) -> None:
    # scatter-accumulate for slice/index backward without a full-size temp
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[index] += g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a_shape, b_shape) -> None:
    for da, db in zip(reversed(a_shape), reversed(b_shape)):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {a_shape} and {b_shape} do not broadcast")


def _swap_axes(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data + b.data

    def bw(out):
        ga = _unbroadcast(out.grad, a.shape)
        _accumulate(a, ga, owned=ga is not out.grad)
        gb = _unbroadcast(out.grad, b.shape)
        _accumulate(b, gb, owned=gb is not out.grad)

    out = _make(data, (a, b))
    out._backward_fn = bw if out.requires_grad else None
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data - b.data

    def bw(out):
        ga = _unbroadcast(out.grad, a.shape)
        _accumulate(a, ga, owned=ga is not out.grad)
        _accumulate(b, _unbroadcast(-out.grad, b.shape), owned=True)

    out = _make(data, (a, b))
    out._backward_fn = bw if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    data = a.data * b.data

    def bw(out):
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape), owned=True)

    out = _make(data, (a, b))
    out._backward_fn = bw if out.requires_grad else None
    return out


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(-a.data, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, -out.grad, owned=True)
    return out


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * (1.0 - y * y), owned=True)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # tanh form: cheaper than exp under this libm and stable on both tails
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * y * (1.0 - y), owned=True)
    return out


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * y, owned=True)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    """a ** p for a scalar exponent. Caller guarantees the base domain."""
    a = _as_tensor(a)
    p = float(exponent)
    y = a.data ** p
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * p * a.data ** (p - 1.0), owned=True)
    return out


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.abs(a.data), (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * np.sign(a.data), owned=True)
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * (a.data > 0.0), owned=True)
    return out


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant mask; no gradient to the mask."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise DimensionError(f"mask shape {mask.shape} != tensor shape {a.shape}")
    out = _make(a.data * mask, (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad * mask, owned=True)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    data = np.matmul(a.data, b.data)

    def bw(out):
        g = out.grad
        if a.requires_grad:
            da = np.matmul(g, b.data.swapaxes(-1, -2))
            _accumulate(a, _unbroadcast(da, a.shape), owned=True)
        if b.requires_grad:
            db = np.matmul(a.data.swapaxes(-1, -2), g)
            _accumulate(b, _unbroadcast(db, b.shape), owned=True)

    out = _make(data, (a, b))
    out._backward_fn = bw if out.requires_grad else None
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _make(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, np.transpose(out.grad, inverse))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = _make(a.data.reshape(shape), (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, out.grad.reshape(a.shape))
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    _check_broadcast(a.shape, shape)
    out = _make(np.broadcast_to(a.data, shape), (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate(a, _unbroadcast(out.grad, a.shape))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    ax = axis if axis >= 0 else data.ndim + axis

    def bw(out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = tuple(
                slice(start, stop) if d == ax else slice(None)
                for d in range(data.ndim))
            _accumulate(t, out.grad[index])

    out = _make(data, tensors)
    out._backward_fn = bw if out.requires_grad else None
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis

    def bw(out):
        for i, t in enumerate(tensors):
            index = tuple(
                i if d == ax else slice(None) for d in range(data.ndim))
            _accumulate(t, out.grad[index])

    out = _make(data, tensors)
    out._backward_fn = bw if out.requires_grad else None
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    index = tuple(
        slice(start, stop) if d == ax else slice(None) for d in range(a.ndim))
    out = _make(a.data[index], (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate_into(a, index, out.grad)
    return out


def take_index(a: Tensor, axis: int, i: int) -> Tensor:
    """Select one slice along ``axis`` and drop that axis."""
    a = _as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    index = tuple(i if d == ax else slice(None) for d in range(a.ndim))
    out = _make(a.data[index], (a,))
    if out.requires_grad:
        out._backward_fn = lambda out: _accumulate_into(a, index, out.grad)
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, -1, start, stop)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out = _make(np.asarray(data), (a,))
    out._backward_fn = bw if out.requires_grad else None
    return out


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]

    def bw(out):
        g = out.grad / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out = _make(np.asarray(data), (a,))
    out._backward_fn = bw if out.requires_grad else None
    return out


def row_max(a: Tensor, keepdims: bool = True) -> Tensor:
    """Maximum over the last axis; gradient flows to the first argmax."""
    a = _as_tensor(a)
    data = a.data.max(axis=-1, keepdims=keepdims)

    def bw(out):
        g = out.grad if keepdims else np.expand_dims(out.grad, -1)
        idx = np.argmax(a.data, axis=-1)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, -1), g, axis=-1)
        _accumulate(a, full)

    out = _make(data, (a,))
    out._backward_fn = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# fused neural-net primitives
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * y, owned=True)

    out = _make(y, (a,))
    out._backward_fn = bw if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift.

    Population variance; requires at least two elements on the last axis.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 elements on the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data

    def bw(out):
        g = out.grad
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape), owned=True)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
            _accumulate(bias, gb, owned=gb is not g)
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv, owned=True)

    out = _make(y, (x, gain, bias))
    out._backward_fn = bw if out.requires_grad else None
    return out


def cosine_rows(a: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of a 2-D tensor.

    Zero rows get similarity 0 against everything (including themselves).
    """
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("cosine_rows expects a 2-D tensor")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 0.0
    safe = np.where(norms > 0.0, norms, 1.0)
    w = a.data / safe
    sim = w @ w.T

    def bw(out):
        g = out.grad
        dw = (g + g.T) @ w
        dx = (dw - w * (w * dw).sum(axis=1, keepdims=True)) / safe
        dx[~nonzero] = 0.0
        _accumulate(a, dx, owned=True)

    out = _make(sim, (a,))
    out._backward_fn = bw if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every leaf (parameters included) reachable from a
    scalar loss.

    Leaf grads accumulate across calls until an explicit zero_grad.  The
    walk consumes the graph: intermediate grads and backward closures are
    released as soon as they have been used, so a fresh forward pass is
    needed before calling backward again.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tracked tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node)
            # free what this node no longer needs: its grad buffer, the
            # closure (and the activations it captured), and its edges
            node._backward_fn = None
            node._parents = ()
            node.grad = None


# ---------------------------------------------------------------------------
# parameter registry and initialization
# ---------------------------------------------------------------------------

def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Weight init: uniform in +/- sqrt(1/fan_in)."""
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Registry of named parameters; names must be unique within a model."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def register(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        p = Parameter(np.ascontiguousarray(data, dtype=np.float64), name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise ContractError(f"missing parameters in state: {sorted(missing)}")
        for name, p in self._params.items():
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name}: shape {src.shape} != expected {p.data.shape}")
            p.data = np.ascontiguousarray(src)
