"""Dense N-D tensors with reverse-mode automatic differentiation.

The canonical axis order used throughout the package is
(batch, time, depth-z, y, x, channel), with trailing axes dropped for
lower-dimensional data.  Arrays are row-major contiguous.  Tensors are
immutable after construction except for documented in-place optimizer
updates on parameter data.

``backward`` accumulates into ``Tensor.grad``; the training loop resets
gradients explicitly once per step via ``zero_grads``.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

# Global dtype for newly created tensors.  float64 is a test-only toggle:
# finite-difference checks are meaningless at 32-bit precision.
_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default tensor dtype (tests use float64)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation passes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense N-D array plus an optional position in a computation graph.

    ``data`` is a numpy array (up to 6 axes), ``grad`` is filled in by
    ``backward`` for leaves with ``requires_grad``.  Non-leaf tensors keep
    references to their parents and a closure that routes the incoming
    gradient to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.size == 0:
            raise ValueError(f"tensor extents must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def full(shape, value, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward_fn(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    # exp of a non-positive argument only, so no overflow on either branch
    e = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward_fn(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward_fn(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward_fn(g):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward_fn)


# -- linear algebra and reductions --------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out_data), (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward_fn)


def getitem(a: Tensor, index) -> Tensor:
    out_data = a.data[index]
    fancy = any(isinstance(i, (list, np.ndarray)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward_fn(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)  # repeated indices must accumulate
        else:
            full[index] += g
        _accumulate(a, full)

    return _make(np.ascontiguousarray(out_data), (a,), backward_fn)


def pad_zero(a: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` as in numpy.pad, one (before, after) per axis."""
    pad_width = tuple(tuple(p) for p in pad_width)
    out_data = np.pad(a.data, pad_width)

    def backward_fn(g):
        slices = tuple(slice(b, g.shape[i] - e) for i, (b, e) in enumerate(pad_width))
        _accumulate(a, g[slices])

    return _make(out_data, (a,), backward_fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        parts = np.split(g, len(tensors), axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                _accumulate(t, part.reshape(t.shape))

    return _make(out_data, tuple(tensors), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward_fn(g):
        offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
        parts = np.split(g, offsets, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                _accumulate(t, part)

    return _make(out_data, tuple(tensors), backward_fn)


# -- reverse pass --------------------------------------------------------------


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype).reshape(t.shape).copy()
    else:
        t.grad += np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into ``grad`` of every reachable leaf with
    ``requires_grad`` (repeated calls without a reset therefore add up;
    the training loop resets once per step).  Interior nodes use ``grad``
    as a transient buffer and are freed on the way down.  Returns
    ``param -> gradient array``; parameters passed explicitly but
    unreachable from the loss get a zero gradient rather than an error.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")
    order = _toposort(loss)
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None  # interior buffer, not a leaf gradient
    result: dict[Tensor, np.ndarray] = {}
    if params is not None:
        for p in params:
            if p.grad is None and p.requires_grad:
                p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite differences --------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-4, max_elements: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on every call.  The
    relative error per element is |analytic - numeric| / max(1, |numeric|).
    ``max_elements`` caps how many entries of each parameter are perturbed
    (sampled with a fixed seed); the default perturbs every entry.
    """
    zero_grads(params)
    loss = f()
    backward(loss, params)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idxs = rng.choice(n, size=max_elements, replace=False)
        else:
            idxs = range(n)
        gflat = np.zeros(n) if grad is None else grad.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(f().data.reshape(-1)[0])
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(f().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    zero_grads(params)
    return worst
