"""Dense tensors with tape-based reverse-mode autodiff.

Every differentiable quantity in the package is a :class:`Tensor`.  Operations
record a node (parents + a closure mapping the output gradient to input
gradients) whenever an input requires gradients, and :func:`backward` replays
the tape in reverse topological order.

Arrays are float32 by default.  :func:`precision` switches the dtype used for
new constants; :func:`grad_check` uses it to run a float64 shadow pass.
"""

from __future__ import annotations

import contextlib
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "NonFiniteGradientWarning",
    "OPS",
    "apply",
    "backward",
    "no_grad",
    "precision",
    "finite_guard",
    "default_dtype",
    "tensor",
    "zeros",
    "ones",
    "custom_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "exp",
    "log",
    "softplus",
    "silu",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax_lastdim",
    "sum",
    "mean",
    "slice",
    "concat",
    "reshape",
    "transpose_last2",
    "permute",
    "cumulative_scan_linear",
    "scan_linear_reference",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """Raised by the finite guard when an op produces NaN or inf."""


class NonFiniteGradientWarning(RuntimeWarning):
    pass


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.float32
        self.check_finite = False


_state = _State()


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Create new constants with ``dtype`` inside the block."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def finite_guard(enabled: bool = True):
    """Check every op output (and every backward gradient) for NaN/inf."""
    prev = _state.check_finite
    _state.check_finite = enabled
    try:
        yield
    finally:
        _state.check_finite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")
    # make ndarray <op> Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_state.dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=_state.dtype), requires_grad, name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state.dtype), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state.dtype), requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_state.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{op}' produced non-finite output")
    out = Tensor(data)
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    """Record a user-defined node.

    ``grad_fn(g)`` must return one gradient array (or None) per parent.
    """
    return _result(data, parents, grad_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    p = float(exponent)
    out = a.data ** p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def softplus(a) -> Tensor:
    a = _lift(a)
    return _result(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _result(out, (a,), lambda g: (g * (s * (1 + a.data * (1 - s))),), "silu")


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _result(out, (a,), grad_fn, "gelu")


def softmax_lastdim(a) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), grad_fn, "softmax_lastdim")


# ----------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), grad_fn, "mean")


# ------------------------------------------------------------------ structure


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), grad_fn, "matmul")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, type(Ellipsis), type(None))) or i.__class__.__name__ == "slice"
               for i in items)


def slice(a, idx) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), grad_fn, "slice")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[x.shape for x in ts]} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _result(out, ts, grad_fn, "concat")


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose_last2(a) -> Tensor:
    a = _lift(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: need ndim >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _result(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose_last2")


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


# ---------------------------------------------------------------- linear scan


def _scan_forward(a: np.ndarray, u: np.ndarray, h0: np.ndarray | None) -> np.ndarray:
    h = np.empty_like(u)
    prev = np.zeros_like(u[:, 0]) if h0 is None else h0
    for t in range(u.shape[1]):
        prev = a[:, t] * prev + u[:, t]
        h[:, t] = prev
    return h


def cumulative_scan_linear(a, u, h0=None) -> Tensor:
    """First-order linear recurrence along axis 1.

    ``h[:, t] = a[:, t] * h[:, t-1] + u[:, t]`` with ``h[:, -1] = h0`` (zeros
    when omitted).  Runs in O(L) time.
    """
    a, u = _lift(a), _lift(u)
    if a.shape != u.shape or a.ndim < 2:
        raise ShapeError(f"cumulative_scan_linear: a{a.shape} and u{u.shape} must match, ndim >= 2")
    parents = [a, u]
    if h0 is not None:
        h0 = _lift(h0)
        if h0.shape != (u.shape[0],) + u.shape[2:]:
            raise ShapeError(f"cumulative_scan_linear: h0 shape {h0.shape} does not fit {u.shape}")
        parents.append(h0)
    h = _scan_forward(a.data, u.data, None if h0 is None else h0.data)

    def grad_fn(g):
        gu = np.empty_like(g)
        carry = np.zeros_like(g[:, 0])
        L = g.shape[1]
        for t in range(L - 1, -1, -1):
            carry = g[:, t] + (a.data[:, t + 1] * carry if t + 1 < L else 0)
            gu[:, t] = carry
        prev = np.empty_like(h)
        prev[:, 1:] = h[:, :-1]
        prev[:, 0] = 0 if h0 is None else h0.data
        ga = gu * prev
        grads = [ga, gu]
        if h0 is not None:
            grads.append(gu[:, 0] * a.data[:, 0])
        return tuple(grads)

    return _result(h, parents, grad_fn, "cumulative_scan_linear")


def scan_linear_reference(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Unvectorized per-element loop for the same recurrence (test oracle)."""
    h = np.zeros_like(u, dtype=np.float64)
    for idx in np.ndindex(u.shape[0], *u.shape[2:]):
        b, rest = idx[0], idx[1:]
        prev = 0.0
        for t in range(u.shape[1]):
            prev = float(a[(b, t) + rest]) * prev + float(u[(b, t) + rest])
            h[(b, t) + rest] = prev
    return h


# ------------------------------------------------------------------- dispatch

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "neg": neg,
    "pow": power,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "silu": silu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "sum": sum,
    "mean": mean,
    "slice": slice,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "reshape": reshape,
    "transpose_last2": transpose_last2,
    "permute": permute,
    "cumulative_scan_linear": cumulative_scan_linear,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op '{op_kind}'") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            leaves.append(node)
            continue
        if _state.check_finite and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient flowing into op '{node.op}'")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    bad = [leaf.name or repr(leaf) for leaf in leaves if not np.all(np.isfinite(leaf.grad))]
    if bad:
        warnings.warn(f"non-finite gradients in: {', '.join(bad)}", NonFiniteGradientWarning,
                      stacklevel=2)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
