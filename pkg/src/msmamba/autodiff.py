"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every traced operation appends a node to the thread's active :class:`Graph`.
``backward`` walks that tape once, in reverse insertion order, and then marks
it consumed; a second ``backward`` on the same tape raises :class:`GraphError`.
The next traced operation after consumption starts a fresh tape.

Binary operations broadcast only along trailing dimensions: one operand's
shape must equal the other's shape or be a suffix of it.
"""

from __future__ import annotations

import contextlib
import math
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DimensionError, DomainError, GraphError, NumericError

__all__ = [
    "Tensor",
    "Graph",
    "GradientMap",
    "tensor",
    "traced",
    "no_grad",
    "tape",
    "grad_enabled",
    "backward",
    "grad_check",
    "grad_check_report",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "softplus",
    "silu",
    "relu",
    "sigmoid",
    "elementwise",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "flip",
    "layer_norm",
    "rms_norm",
]

SOFTPLUS_LINEAR_ABOVE = 30.0


@dataclass
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Insertion-ordered operation tape; inputs always precede their consumers."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> int:
        if self.consumed:
            raise GraphError("cannot record onto a consumed graph")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


_state = threading.local()


def _active_graph() -> Graph:
    graph = getattr(_state, "graph", None)
    if graph is None or graph.consumed:
        graph = Graph()
        _state.graph = graph
    return graph


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def tape():
    """Install a fresh graph for the duration of the block and yield it."""
    previous = getattr(_state, "graph", None)
    graph = Graph()
    _state.graph = graph
    try:
        yield graph
    finally:
        _state.graph = previous


class Tensor:
    """An n-dimensional float64 array that may participate in a graph.

    ``node`` is ``None`` for leaves and constants, otherwise a
    ``(graph, index)`` handle into the tape that produced the value.
    """

    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, values: Any, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: tuple[Graph, int] | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, node: tuple[Graph, int] | None = None) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data)
        # extended precision survives so finite differencing can run above float64
        out.data = data if data.dtype == np.longdouble else data.astype(np.float64, copy=False)
        out.requires_grad = node is not None
        out.node = node
        out.name = None
        return out

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
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{label})"

    def __len__(self) -> int:
        return len(self.data)

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(values: Any, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value, dtype=np.float64))


def traced(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` and record it on the active tape when any input needs grad.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per
    input, each with that input's exact shape.
    """
    if not grad_enabled() or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(out)
    graph = _active_graph()
    for t in inputs:
        if t.node is not None and t.node[0] is not graph:
            raise GraphError(f"{op}: operand was produced on a different or consumed graph")
    index = graph.record(Node(op, tuple(inputs), backward_fn))
    return Tensor._wrap(out, node=(graph, index))


class GradientMap(dict):
    """Leaf tensor -> gradient array; leaves not reached by the loss read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape)

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: g for t, g in self.items() if t.name is not None}


def backward(loss: Tensor) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to every reachable leaf."""
    if loss.ndim != 0:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss is not traced; no input required grad or grad was disabled")
    graph, last = loss.node
    if graph.consumed:
        raise GraphError("graph already consumed by an earlier backward")
    graph.consumed = True
    pending: dict[int, np.ndarray] = {last: np.ones(())}
    leaves: dict[int, list] = {}
    for index in range(last, -1, -1):
        grad = pending.pop(index, None)
        if grad is None:
            continue
        node = graph.nodes[index]
        for inp, g in zip(node.inputs, node.backward(grad)):
            if g is None or not inp.requires_grad:
                continue
            if inp.node is None:
                slot = leaves.get(id(inp))
                if slot is None:
                    leaves[id(inp)] = [inp, np.array(g, dtype=np.float64)]
                else:
                    slot[1] = slot[1] + g
            else:
                j = inp.node[1]
                pending[j] = pending[j] + g if j in pending else g
    graph.nodes.clear()
    result = GradientMap()
    for leaf, g in leaves.values():
        result[leaf] = g
    return result


# --------------------------------------------------------------------------
# shape helpers


def _check_trailing(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not trailing-broadcast compatible")
    return long_


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, p]`` or batched ``a[..., m, k] @ b[..., k, p]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")
    if b.ndim > a.ndim:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data
    av, bv = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                k, p = bv.shape
                gb = av.reshape(-1, k).T @ g.reshape(-1, p)
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return traced("matmul", out, (a, b), grad_fn)


# --------------------------------------------------------------------------
# binary elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return traced("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return traced("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Any, b: Any) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_trailing("mul", a.shape, b.shape)
    av, bv = a.data, b.data

    def grad_fn(g):
        ga = _reduce_to(g * bv, av.shape) if a.requires_grad else None
        gb = _reduce_to(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return traced("mul", av * bv, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return traced("neg", -a.data, (a,), lambda g: (-g,))


# --------------------------------------------------------------------------
# unary elementwise


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; pick the algebraically equivalent form by sign
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _softplus(x: np.ndarray) -> np.ndarray:
    safe = np.minimum(x, SOFTPLUS_LINEAR_ABOVE)
    return np.where(x > SOFTPLUS_LINEAR_ABOVE, x, np.log1p(np.exp(safe)))


def _softplus_grad(x, y):
    return np.where(x > SOFTPLUS_LINEAR_ABOVE, 1.0, _sigmoid(x))


def _silu_grad(x, y):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sigmoid_grad(x, y):
    return y * (1.0 - y)


# kind -> (value(x), derivative(x, value)); tests patch entries as negative controls
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "exp": (np.exp, lambda x, y: y),
    "softplus": (_softplus, _softplus_grad),
    "silu": (lambda x: x * _sigmoid(x), _silu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sigmoid": (_sigmoid, _sigmoid_grad),
}


def _unary(kind: str, a: Any) -> Tensor:
    a = _as_tensor(a)
    fn, _ = UNARY_RULES[kind]
    x = a.data
    y = fn(x)

    def grad_fn(g):
        return (g * UNARY_RULES[kind][1](x, y),)

    return traced(kind, y, (a,), grad_fn)


def exp(a) -> Tensor:
    return _unary("exp", a)


def softplus(a) -> Tensor:
    """ln(1 + e^x); returns x itself above 30 to keep exp finite."""
    return _unary("softplus", a)


def silu(a) -> Tensor:
    return _unary("silu", a)


def relu(a) -> Tensor:
    return _unary("relu", a)


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a)


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, mul, exp, softplus, silu, relu, sigmoid, mean."""
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in binary:
        if len(operands) != 2:
            raise TypeError(f"{kind} takes two operands")
        return binary[kind](*operands)
    if kind == "mean":
        return mean(*operands)
    if kind in UNARY_RULES:
        if len(operands) != 1:
            raise TypeError(f"{kind} takes one operand")
        return _unary(kind, operands[0])
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# reductions and reshaping


def _normalize_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return traced("sum", out, (a,), grad_fn)


def mean(a: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    if count == 0:
        raise DimensionError(f"mean over empty axes of shape {a.shape}")
    shape = a.shape
    out = a.data.mean(axis=axes)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape).copy(),)

    return traced("mean", out, (a,), grad_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    return traced("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 dims, got {a.shape}")
    return traced("transpose", np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def flip(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    return traced("flip", np.flip(a.data, axis=axis).copy(), (a,), lambda g: (np.flip(g, axis=axis).copy(),))


def _getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    out = np.array(a.data[index])

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return traced("index", out, (a,), grad_fn)


# --------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply ``gain * x + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    xv = x.data
    centered = xv - xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gv = gain.data
    out = xhat * gv + bias.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv_std * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = _reduce_to(g * xhat, (d,)) if gain.requires_grad else None
        gbias = _reduce_to(g, (d,)) if bias.requires_grad else None
        return gx, ggain, gbias

    return traced("layer_norm", out, (x, gain, bias), grad_fn)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("rms_norm over an empty axis")
    if gain.shape != (d,):
        raise DimensionError(f"rms_norm: gain {gain.shape} vs last axis {d}")
    xv, gv = x.data, gain.data
    inv_rms = 1.0 / np.sqrt((xv * xv).mean(axis=-1, keepdims=True) + eps)
    normed = xv * inv_rms

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gv
            gx = inv_rms * (gh - normed * (gh * normed).mean(axis=-1, keepdims=True))
        ggain = _reduce_to(g * normed, (d,)) if gain.requires_grad else None
        return gx, ggain

    return traced("rms_norm", normed * gv, (x, gain), grad_fn)


# --------------------------------------------------------------------------
# finite-difference checking


def grad_check_report(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
    precision: type = np.longdouble,
) -> dict[str, float]:
    """Worst relative error per parameter between backward() and central differences.

    ``f`` recomputes a scalar loss from the current parameter values. Relative
    error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.

    The differenced evaluations run with parameter storage promoted to
    ``precision`` (extended by default). In float64 the rounding noise of
    ``f(p + h) - f(p - h)`` at ``h = 1e-5`` is ~1e-11, larger than the
    weakest coordinates' gradients in a freshly initialized selective SSM.
    Analytic gradients are always computed in float64.
    """
    if step <= 0:
        raise DomainError(f"finite-difference step must be positive, got {step}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    with tape():
        loss = f()
        if loss.node is None:
            grads = GradientMap()
        else:
            grads = backward(loss)

    def evaluate() -> float:
        with no_grad():
            value = f().data.item()
        if not math.isfinite(value):
            raise NumericError(f"objective evaluated to {value} during finite differencing")
        return value

    originals = {name: p.data for name, p in named}
    for name, p in named:
        p.data = originals[name].astype(precision)
    report: dict[str, float] = {}
    try:
        for name, p in named:
            analytic = grads[p].reshape(-1)
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                f_plus = evaluate()
                flat[i] = original - step
                f_minus = evaluate()
                flat[i] = original
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(analytic[i]), abs(numeric), 1e-8)
                worst = max(worst, float(abs(analytic[i] - numeric) / denom))
            report[name] = worst
    finally:
        for name, p in named:
            p.data = originals[name]
    return report


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
) -> float:
    """Maximum relative gradient error over all coordinates of ``params``."""
    report = grad_check_report(f, params, step)
    return max(report.values(), default=0.0)
