"""Reverse-mode automatic differentiation over dense float64 arrays.

Tensors are immutable wrappers around read-only ``numpy`` arrays. A :class:`Tape`
records the primitives applied to the tensors it watches; while a tape is
active, every primitive whose inputs it tracks is appended to it. Tapes nest,
and a backward pass runs through the same primitives, so a gradient computed
from an inner tape is recorded on any outer tape that is still active. The
outer tape can then differentiate a function of that gradient::

    with Tape() as outer:
        outer.watch(x)
        with Tape() as inner:
            inner.watch(w)
            loss = softmax_cross_entropy(matmul(x, w), labels)
        (gw,) = inner.gradient(loss, [w])
        penalty = sum_all(gw * gw)
    (dx,) = outer.gradient(penalty, [x])

Primitives registered through :func:`first_order_primitive` compute their
vector-Jacobian products with plain numpy and cannot be re-recorded. When one
of them sits on a path that an outer tape needs, that tape gets a marker node
and differentiating through it raises :class:`UnsupportedPrimitiveError`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "UnsupportedPrimitiveError",
    "tensor",
    "constant",
    "backward",
    "grad_of_grad",
    "first_order_primitive",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "square",
    "sum_all",
    "reduce_sum",
    "reshape",
    "broadcast_to",
    "sum_to",
    "getitem",
    "logsumexp",
    "softmax",
    "softmax_cross_entropy",
    "clamp",
]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class UnsupportedPrimitiveError(RuntimeError):
    """A first-order-only primitive was hit while differentiating a gradient."""


_state = threading.local()
_tape_ids = itertools.count()


def _active() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Skips the defensive copy for arrays produced internally.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


constant = tensor


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[Tensor], Sequence[Tensor | None]]
    second_order: bool = True


@dataclass
class Tape:
    """Append-only record of primitives applied to watched tensors."""

    nodes: list[_Node] = field(default_factory=list)
    uid: int = field(default_factory=lambda: next(_tape_ids))

    def __post_init__(self) -> None:
        self._tracked: dict[int, Tensor] = {}
        self._leaves: list[Tensor] = []
        self._paused = 0

    def __enter__(self) -> "Tape":
        _active().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active()
        # Tapes may be exited out of order when used without `with` nesting.
        for i in range(len(stack) - 1, -1, -1):
            if stack[i] is self:
                del stack[i]
                break

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor objects, got {type(t).__name__}")
            if id(t) not in self._tracked:
                self._tracked[id(t)] = t
                self._leaves.append(t)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def tracks(self, t: object) -> bool:
        return isinstance(t, Tensor) and self._tracked.get(id(t)) is t

    def _append(self, node: _Node) -> None:
        self.nodes.append(node)
        self._tracked[id(node.output)] = node.output

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        """Gradients of the scalar ``target`` with respect to each source.

        Sources not connected to ``target`` receive zeros. The computation is
        itself recorded on any other active tape that tracks the tensors
        involved, which is what makes second derivatives available.
        """
        if not isinstance(target, Tensor):
            raise TypeError("target must be a Tensor")
        if target.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {target.shape}")
        if not self.tracks(target):
            return [Tensor._wrap(np.zeros(s.shape)) for s in sources]

        grads: dict[int, Tensor] = {id(target): Tensor._wrap(np.ones(target.shape))}
        wanted = {id(s) for s in sources}
        self._paused += 1
        try:
            for node in reversed(self.nodes):
                key = id(node.output)
                g = grads.get(key) if key in wanted else grads.pop(key, None)
                if g is None:
                    continue
                in_grads = node.vjp(g)
                if not node.second_order:
                    in_grads = _mark_first_order(node, g, in_grads)
                for x, gx in zip(node.inputs, in_grads):
                    if gx is None or not self.tracks(x):
                        continue
                    prev = grads.get(id(x))
                    grads[id(x)] = gx if prev is None else add(prev, gx)
        finally:
            self._paused -= 1
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(g if g is not None else Tensor._wrap(np.zeros(s.shape)))
        return out


def _recording_tapes(inputs: Iterable[object]) -> list[Tape]:
    inputs = tuple(inputs)
    return [t for t in _active() if not t._paused and any(t.tracks(x) for x in inputs)]


def _record(op: str, inputs: tuple, out: Tensor, vjp, second_order: bool = True) -> Tensor:
    tapes = _recording_tapes(inputs)
    if tapes:
        inputs = tuple(x for x in inputs)
        for tape in tapes:
            tape._append(_Node(op, inputs, out, vjp, second_order))
    return out


def _mark_first_order(node: _Node, g: Tensor, in_grads):
    """Attach a poison node on outer tapes for a non re-recordable VJP."""
    watched = (g,) + node.inputs
    tapes = _recording_tapes(watched)
    if not tapes:
        return in_grads

    def refuse(_g):
        raise UnsupportedPrimitiveError(
            f"primitive {node.op!r} has no second-order support; "
            "its gradient cannot be differentiated again"
        )

    marked = []
    for gx in in_grads:
        if gx is None:
            marked.append(None)
            continue
        gx = Tensor._wrap(gx.data)
        for tape in tapes:
            tape._append(_Node(f"{node.op}:vjp", watched, gx, refuse, False))
        marked.append(gx)
    return marked


def backward(tape: Tape, output: Tensor) -> dict[Tensor, Tensor]:
    """Gradient map from every watched leaf of ``tape`` to d(output)/d(leaf)."""
    leaves = tape.leaves
    return dict(zip(leaves, tape.gradient(output, leaves)))


def grad_of_grad(tape2: Tape, scalar_of_gradients: Tensor, wrt_leaf: Tensor) -> Tensor:
    """Differentiate a scalar built from recorded gradients.

    ``tape2`` must have been active while the inner gradient was computed, so
    the backward pass is on it. Raises :class:`UnsupportedPrimitiveError` if a
    first-order-only primitive lies on the path.
    """
    if not tape2.tracks(wrt_leaf):
        raise ValueError("wrt_leaf is not watched by the given tape")
    return tape2.gradient(scalar_of_gradients, [wrt_leaf])[0]


# --------------------------------------------------------------------------
# primitives


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("add", a, b)
    out = Tensor._wrap(a.data + b.data)
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("sub", a, b)
    out = Tensor._wrap(a.data - b.data)
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("mul", a, b)
    out = Tensor._wrap(a.data * b.data)
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape("div", a, b)
    out = Tensor._wrap(a.data / b.data)

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("div", (a, b), out, vjp)


def neg(a) -> Tensor:
    a = tensor(a)
    return _record("neg", (a,), Tensor._wrap(-a.data), lambda g: (neg(g),))


def square(a) -> Tensor:
    return mul(a, a)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor._wrap(a.data @ b.data)
    return _record("matmul", (a, b), out,
                   lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", (a,), Tensor._wrap(a.data.T), lambda g: (transpose(g),))


def relu(x) -> Tensor:
    x = tensor(x)
    mask = Tensor._wrap((x.data > 0).astype(np.float64))
    out = Tensor._wrap(x.data * mask.data)
    # relu'' vanishes almost everywhere; the mask is a constant for higher orders.
    return _record("relu", (x,), out, lambda g: (mul(g, mask),))


def sigmoid(x) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(0.5 * (1.0 + np.tanh(0.5 * x.data)))
    return _record("sigmoid", (x,), out, lambda g: (mul(g, mul(out, sub(1.0, out))),))


def exp(x) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(np.exp(x.data))
    return _record("exp", (x,), out, lambda g: (mul(g, out),))


def log(x) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(np.log(x.data))
    return _record("log", (x,), out, lambda g: (div(g, x),))


def sqrt(x) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(np.sqrt(x.data))
    return _record("sqrt", (x,), out, lambda g: (div(g, mul(2.0, out)),))


def absolute(x) -> Tensor:
    x = tensor(x)
    sign = Tensor._wrap(np.sign(x.data))
    return _record("abs", (x,), Tensor._wrap(np.abs(x.data)), lambda g: (mul(g, sign),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = tensor(x)
    inside = Tensor._wrap(((x.data >= lo) & (x.data <= hi)).astype(np.float64))
    out = Tensor._wrap(np.clip(x.data, lo, hi))
    return _record("clamp", (x,), out, lambda g: (mul(g, inside),))


def reduce_sum(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(np.sum(x.data, axis=axis, keepdims=keepdims))
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            kept = list(shape)
            for ax in axes:
                kept[ax % len(shape)] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, shape),)

    return _record("sum", (x,), out, vjp)


def sum_all(x) -> Tensor:
    return reduce_sum(x)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = tensor(x)
    try:
        out = Tensor._wrap(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    src = x.shape
    return _record("reshape", (x,), out, lambda g: (reshape(g, src),))


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        out = Tensor._wrap(np.broadcast_to(x.data, shape).copy())
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _record("broadcast_to", (x,), out, lambda g: (sum_to(g, src),))


def sum_to(x, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``, the adjoint of broadcasting."""
    x = tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1
    )
    data = np.sum(x.data, axis=axes, keepdims=True)
    out = Tensor._wrap(data.reshape(shape))
    return _record("sum_to", (x,), out, lambda g: (broadcast_to(g, x.shape),))


def getitem(x, index) -> Tensor:
    x = tensor(x)
    out = Tensor._wrap(x.data[index])
    return _record("getitem", (x,), out, lambda g: (_scatter(g, index, x.shape),))


def _scatter(g: Tensor, index, shape: tuple[int, ...]) -> Tensor:
    buf = np.zeros(shape)
    np.add.at(buf, index, g.data)
    out = Tensor._wrap(buf)
    return _record("scatter", (g,), out, lambda h: (getitem(h, index),))


def logsumexp(x, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis`` (reduced away)."""
    x = tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True)) + m
    out = Tensor._wrap(np.squeeze(lse, axis=axis))
    kept = lse.shape

    def vjp(g):
        g = reshape(g, kept)
        p = exp(sub(x, reshape(out, kept)))
        return (mul(broadcast_to(g, x.shape), p),)

    return _record("logsumexp", (x,), out, vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = tensor(x)
    lse = logsumexp(x, axis=axis)
    kept = list(x.shape)
    kept[axis] = 1
    return exp(sub(x, reshape(lse, tuple(kept))))


def softmax_cross_entropy(logits, labels, reduction: str = "sum") -> Tensor:
    """Cross-entropy of softmax(logits) against integer or soft labels.

    ``logits`` is (C,) or (N, C). ``labels`` may be an int, a sequence of N
    ints, or a Tensor/array of target distributions with the logits' shape.
    The per-example loss is ``logsumexp(z) - <p, z>``, which equals
    ``-log softmax(z)[y]`` for one-hot ``p``.
    """
    logits = tensor(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = reshape(logits, (1, logits.shape[0]))
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 1-D or 2-D, got {logits.shape}")
    n, c = logits.shape
    if isinstance(labels, Tensor) or (isinstance(labels, np.ndarray) and labels.dtype.kind == "f"):
        target = tensor(labels)
        if target.ndim == 1 and squeeze:
            target = reshape(target, (1, c))
        if target.shape != logits.shape:
            raise ShapeError(
                f"softmax_cross_entropy: logits shape {logits.shape} and target shape {target.shape}"
            )
    else:
        idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if idx.shape != (n,):
            raise ShapeError(
                f"softmax_cross_entropy: logits shape {logits.shape} and labels shape {idx.shape}"
            )
        if np.any(idx < 0) or np.any(idx >= c):
            raise ValueError(f"labels must lie in [0, {c}), got {idx.tolist()}")
        onehot = np.zeros((n, c))
        onehot[np.arange(n), idx] = 1.0
        target = Tensor._wrap(onehot)
    per_example = sub(logsumexp(logits, axis=1), reduce_sum(mul(target, logits), axis=1))
    if reduction == "sum":
        return reduce_sum(per_example)
    if reduction == "mean":
        return div(reduce_sum(per_example), float(n))
    if reduction == "none":
        return per_example
    raise ValueError(f"unknown reduction {reduction!r}")


def first_order_primitive(name: str, forward: Callable, vjp: Callable):
    """Register a primitive whose VJP is computed in raw numpy.

    ``forward(*arrays) -> array`` and ``vjp(g, out, *arrays) -> tuple of arrays``.
    Gradients through it work, but differentiating those gradients again
    raises :class:`UnsupportedPrimitiveError`.
    """

    def op(*args):
        xs = tuple(tensor(a) for a in args)
        out = Tensor._wrap(forward(*(x.data for x in xs)))

        def _vjp(g):
            gs = vjp(g.data, out.data, *(x.data for x in xs))
            return tuple(None if v is None else Tensor._wrap(np.asarray(v, dtype=np.float64)) for v in gs)

        return _record(name, xs, out, _vjp, second_order=False)

    op.__name__ = name
    return op
