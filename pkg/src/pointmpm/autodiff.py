"""Reverse-mode automatic differentiation on dense numpy arrays.

Tape-based engine: every operation computes its numpy value eagerly and
records a backward closure. float32 is the training precision, float64 the
gradient-checking precision. Any operation producing a non-finite value
raises NonFiniteError immediately instead of letting NaN/Inf propagate.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Expression",
    "NonFiniteError",
    "ShapeMismatchError",
    "UnboundLeafError",
    "as_tensor",
    "evaluate",
    "gradient",
    "grad_check",
    "matmul",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "reduce_min",
    "concat",
    "gather",
    "batched_gather",
    "reshape",
    "transpose",
    "broadcast_to",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UnboundLeafError(LookupError):
    """An Expression leaf has no binding."""


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Dense array plus the tape bookkeeping needed for backprop.

    Leaves are created directly (requires_grad=True for trainable
    parameters); interior nodes are created by the op functions below.
    Treat .data as immutable once the tensor participates in a graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor: cuts the graph, shares the array."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def backward(self) -> None:
        """Accumulate gradients of this scalar into .grad of reachable leaves."""
        if self.data.size != 1:
            raise ShapeMismatchError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operators
    def __add__(self, other):
        return _binary(self, _coerce(other, self.data.dtype), "add",
                       lambda a, b: a + b, lambda g, a, b: g, lambda g, a, b: g)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return _binary(self, _coerce(other, self.data.dtype), "sub",
                       lambda a, b: a - b, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _coerce(other, self.data.dtype).__sub__(self)

    def __mul__(self, other):
        return _binary(self, _coerce(other, self.data.dtype), "mul",
                       lambda a, b: a * b, lambda g, a, b: g * b, lambda g, a, b: g * a)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return _binary(self, _coerce(other, self.data.dtype), "div",
                       lambda a, b: a / b,
                       lambda g, a, b: g / b,
                       lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _coerce(other, self.data.dtype).__truediv__(self)

    def __neg__(self):
        return _unary(self, "neg", lambda a: -a, lambda g, a, v: -g)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return gather(self, np.asarray(key))
        if isinstance(key, (list, np.ndarray)):
            return gather(self, np.asarray(key))
        raise TypeError(f"unsupported index type {type(key)!r}")

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(value: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a: Tensor, b: Tensor, op: str, fwd, dfa, dfb) -> Tensor:
    with np.errstate(all="ignore"):  # non-finite results raise in _node instead
        value = fwd(a.data, b.data)

    def backward(g):
        _accumulate(a, _unbroadcast(dfa(g, a.data, b.data), a.data.shape))
        _accumulate(b, _unbroadcast(dfb(g, a.data, b.data), b.data.shape))

    return _node(value, (a, b), backward, op)


def _unary(a: Tensor, op: str, fwd, dfa) -> Tensor:
    with np.errstate(all="ignore"):
        value = fwd(a.data)

    def backward(g):
        _accumulate(a, dfa(g, a.data, value))

    return _node(value, (a,), backward, op)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError("matmul requires operands with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    with np.errstate(all="ignore"):
        value = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(value, (a, b), backward, "matmul")


def exp(x) -> Tensor:
    return _unary(as_tensor(x), "exp", np.exp, lambda g, a, v: g * v)


def log(x) -> Tensor:
    return _unary(as_tensor(x), "log", np.log, lambda g, a, v: g / a)


def relu(x) -> Tensor:
    return _unary(as_tensor(x), "relu",
                  lambda a: np.maximum(a, 0.0),
                  lambda g, a, v: g * (a > 0))


def gelu(x) -> Tensor:
    """Exact gelu: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = as_tensor(x)
    e = erf(x.data * _INV_SQRT2)
    value = (0.5 * x.data * (1.0 + e)).astype(x.data.dtype, copy=False)

    def backward(g):
        d = 0.5 * (1.0 + e) + x.data * _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * d.astype(x.data.dtype, copy=False))

    return _node(value, (x,), backward, "gelu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        _accumulate(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (x,), backward, "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def backward(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - y * (g * y).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _node(y, (x,), backward, "layer_norm")


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise NonFiniteError("l2_normalize: zero-norm slice")
    y = x.data / norm

    def backward(g):
        _accumulate(x, (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm)

    return _node(y, (x,), backward, "l2_normalize")


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        _accumulate(x, _expand_reduced(g, x.data.shape, axis, keepdims).astype(x.data.dtype, copy=False))

    return _node(np.asarray(value), (x,), backward, "sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    value = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        _accumulate(x, _expand_reduced(g / count, x.data.shape, axis, keepdims).astype(x.data.dtype, copy=False))

    return _node(np.asarray(value), (x,), backward, "mean")


def _arg_reduce(x: Tensor, axis: int, keepdims: bool, argfn, op: str) -> Tensor:
    if not isinstance(axis, int):
        raise ShapeMismatchError(f"{op} requires an integer axis")
    idx = argfn(x.data, axis=axis)
    value = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        value = np.squeeze(value, axis=axis)

    def backward(g):
        ge = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), ge, axis=axis)
        _accumulate(x, gx)

    return _node(value, (x,), backward, op)


def reduce_max(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first (lowest-index) maximum."""
    return _arg_reduce(as_tensor(x), axis, keepdims, np.argmax, "max")


def reduce_min(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _arg_reduce(as_tensor(x), axis, keepdims, np.argmin, "min")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeMismatchError(f"concat: {err}") from err
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            _accumulate(t, part)

    return _node(value, tuple(ts), backward, "concat")


def gather(x, idx) -> Tensor:
    """Index rows along axis 0; output shape = idx.shape + x.shape[1:]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError("gather indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(f"gather index out of range for axis of size {x.data.shape[0]}")
    value = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _node(value, (x,), backward, "gather")


def batched_gather(x, idx) -> Tensor:
    """Per-sample row gather: x is (B, n, ...), idx is (B, ...), out[b] = x[b][idx[b]]."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError("batched_gather indices must be integers")
    if idx.shape[0] != x.data.shape[0]:
        raise ShapeMismatchError("batched_gather: leading dimensions differ")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise IndexError(f"batched_gather index out of range for axis of size {x.data.shape[1]}")
    b = np.arange(x.data.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    value = x.data[b, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(b, idx.shape), idx), g)
        _accumulate(x, gx)

    return _node(value, (x,), backward, "batched_gather")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    try:
        value = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeMismatchError(f"reshape: {err}") from err

    def backward(g):
        _accumulate(x, g.reshape(old))

    return _node(value, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    value = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inverse))

    return _node(value, (x,), backward, "transpose")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        value = np.broadcast_to(x.data, shape).copy()
    except ValueError as err:
        raise ShapeMismatchError(f"broadcast_to: {err}") from err

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.data.shape))

    return _node(value, (x,), backward, "broadcast_to")


class Expression:
    """Deferred computation over named leaves.

    The computation graph is materialized by binding the leaves: `fn`
    receives a dict of leaf-name -> Tensor and returns the root Tensor.
    evaluate/gradient build a fresh graph per call, so concurrent calls
    with distinct bindings never share mutable state.
    """

    def __init__(self, fn: Callable[[Mapping[str, Tensor]], Tensor], leaves: Iterable[str]):
        self.fn = fn
        self.leaves = tuple(leaves)

    def bind(self, bindings: Mapping, requires_grad=()) -> tuple[dict, Tensor]:
        missing = [name for name in self.leaves if name not in bindings]
        if missing:
            raise UnboundLeafError(f"unbound leaves: {missing}")
        grads = set(requires_grad)
        leaf_tensors = {
            name: Tensor(np.asarray(bindings[name].data if isinstance(bindings[name], Tensor)
                                    else bindings[name]),
                         requires_grad=name in grads)
            for name in self.leaves
        }
        return leaf_tensors, self.fn(leaf_tensors)


def evaluate(expr: Expression, bindings: Mapping) -> Tensor:
    """Forward value of expr under the given leaf bindings."""
    _, out = expr.bind(bindings)
    return out


def gradient(expr: Expression, bindings: Mapping, wrt=None) -> dict:
    """d(expr)/d(leaf) for each requested leaf; zeros where no path exists."""
    wrt = tuple(wrt) if wrt is not None else expr.leaves
    unknown = [name for name in wrt if name not in expr.leaves]
    if unknown:
        raise UnboundLeafError(f"not leaves of this expression: {unknown}")
    leaves, out = expr.bind(bindings, requires_grad=wrt)
    if out.data.size != 1:
        raise ShapeMismatchError("gradient requires a scalar-valued expression")
    out.backward()
    return {name: (leaves[name].grad if leaves[name].grad is not None
                   else np.zeros_like(leaves[name].data))
            for name in wrt}


def grad_check(expr: Expression, bindings: Mapping, eps: float = 1e-5, wrt=None) -> float:
    """Worst relative error between analytic gradient and central differences.

    Bindings are promoted to float64; the denominator is floored at 1e-8 to
    keep near-zero gradients from blowing up the ratio.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    wrt = tuple(wrt) if wrt is not None else expr.leaves
    b64 = {}
    for name in expr.leaves:
        if name not in bindings:
            raise UnboundLeafError(f"unbound leaves: [{name!r}]")
        v = bindings[name]
        b64[name] = np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    analytic = gradient(expr, b64, wrt=wrt)
    worst = 0.0
    for name in wrt:
        base = b64[name]
        flat = base.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(evaluate(expr, b64).data)
            flat[i] = orig - eps
            fm = float(evaluate(expr, b64).data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(aflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
