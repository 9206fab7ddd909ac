"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node on the active :class:`Tape`. Backward
rules are themselves written in terms of tensor ops, so calling :func:`grad`
with ``create_graph=True`` records the backward pass on the same tape and the
result can be differentiated again. That is what makes exact meta-gradients
through one inner gradient step possible.

Typical use::

    with Tape():
        w = Tensor(np.ones(3), requires_grad=True)
        loss = (w * w).sum()
        (gw,) = grad(loss, [w])
"""

from __future__ import annotations

import contextlib
import enum
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "GradMode",
    "NumericDomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "UsageError",
    "as_tensor",
    "broadcast_to",
    "clip_min",
    "concat",
    "exp",
    "finite_diff_check",
    "grad",
    "grad_through_update",
    "inner_step",
    "log",
    "log_softmax",
    "matmul",
    "meta_gradient",
    "no_grad",
    "relu",
    "scatter_add",
    "softmax",
    "sqrt",
    "sqdist",
    "sum_to",
    "take",
]


class NumericDomainError(ArithmeticError):
    """A forward op produced a non-finite value."""


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class UsageError(RuntimeError):
    """The differentiation API was called in an unsupported way."""


class GradMode(enum.Enum):
    FIRST_ORDER = "first"
    EXACT = "exact"

    @classmethod
    def parse(cls, value: "GradMode | str") -> "GradMode":
        if isinstance(value, cls):
            return value
        value = str(value).lower()
        for mode in cls:
            if value in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"unknown grad mode {value!r}")


# ---------------------------------------------------------------------------
# tape and recording state


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "out", "freed")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.out = out
        self.freed = False


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.grad_enabled = True


_state = _State()


class Tape:
    """Append-only record of differentiable ops.

    Node ids are list positions, so inputs always precede their consumers.
    Entering the tape as a context makes it active for the current thread;
    leaving it frees every node. Tapes are not shared between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._freed_upto = 0

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _state.tapes.pop()
        assert popped is self
        self.free()
        return False

    def record(self, op: str, inputs: tuple, backward_fn, out) -> int:
        self.nodes.append(_Node(op, inputs, backward_fn, out))
        return len(self.nodes) - 1

    def checkpoint(self) -> int:
        """Mark the current end of the tape, for use with :meth:`truncate`."""
        return len(self.nodes)

    def truncate(self, mark: int | None = None) -> None:
        """Drop the saved state of every node recorded before ``mark``.

        Backward passes that need a freed node raise :class:`UsageError`.
        """
        mark = len(self.nodes) if mark is None else mark
        for node in self.nodes[self._freed_upto:mark]:
            node.freed = True
            node.inputs = ()
            node.backward_fn = None
            node.out = None
        self._freed_upto = max(self._freed_upto, mark)

    def free(self) -> None:
        self.truncate()


def _active_tape() -> Tape | None:
    return _state.tapes[-1] if _state.tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def _grad_enabled(flag: bool) -> Iterator[None]:
    prev = _state.grad_enabled
    _state.grad_enabled = flag
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """An immutable float64 array, optionally tracked on a tape.

    ``requires_grad=True`` on a tensor built by the user makes it a leaf that
    gradients can be taken with respect to. Outputs of ops are tracked only
    while a tape is active and gradient recording is enabled.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericDomainError("tensor data contains non-finite values")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        return t

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self, requires_grad: bool = False) -> "Tensor":
        t = Tensor._wrap(self.data)
        t.requires_grad = requires_grad
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
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
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericDomainError(f"{op} produced a non-finite value")


def _apply(op: str, out_data, inputs: tuple, backward_fn: Callable) -> Tensor:
    """Wrap ``out_data`` and record the op if any input is tracked.

    ``backward_fn(g, out)`` returns one gradient (or None) per input.
    """
    _check_finite(op, out_data)
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is None or not _state.grad_enabled:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    for t in inputs:
        if t.node_id is not None and t.tape is not tape:
            raise UsageError(f"{op}: input was recorded on a different tape")
    out.requires_grad = True
    out.tape = tape
    out.node_id = tape.record(op, inputs, backward_fn, out)
    return out


# ---------------------------------------------------------------------------
# primitive ops


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return _apply("add", out, (a, b), lambda g, o: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data
    return _apply("sub", out, (a, b), lambda g, o: (sum_to(g, a.shape), sum_to(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", -a.data, (a,), lambda g, o: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g, o):
        return (
            sum_to(g * b, a.shape) if a.requires_grad else None,
            sum_to(g * a, b.shape) if b.requires_grad else None,
        )

    return _apply("mul", out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(all="ignore"):
        out = a.data / b.data

    def backward(g, o):
        return (
            sum_to(g / b, a.shape) if a.requires_grad else None,
            sum_to(-g * o / b, b.shape) if b.requires_grad else None,
        )

    return _apply("div", out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = a.data @ b.data

    def backward(g, o):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _apply("matmul", out, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _apply("transpose", a.data.T, (a,), lambda g, o: (transpose(g),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _apply("reshape", out, (a,), lambda g, o: (reshape(g, a.shape),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g, o):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _apply("sum", out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _apply("broadcast_to", np.array(out), (a,), lambda g, o: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape``; the adjoint of numpy broadcasting."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and a.shape[lead + i] != 1:
            axes.append(lead + i)
    out = a.data.sum(axis=tuple(axes), keepdims=True)
    out = out.reshape(shape)
    return _apply("sum_to", out, (a,), lambda g, o: (broadcast_to(g, a.shape),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.exp(a.data)
    return _apply("exp", out, (a,), lambda g, o: (g * o,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    return _apply("log", out, (a,), lambda g, o: (g / a,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        out = np.sqrt(a.data)
    return _apply("sqrt", out, (a,), lambda g, o: (g * 0.5 / o,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _apply("relu", a.data * mask, (a,), lambda g, o: (g * mask,))


def clip_min(a, lo: float) -> Tensor:
    """``max(a, lo)`` elementwise; gradient flows only where ``a > lo``."""
    a = as_tensor(a)
    mask = (a.data > lo).astype(np.float64)
    out = np.maximum(a.data, lo)
    return _apply("clip_min", out, (a,), lambda g, o: (g * mask,))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing, ``a[index]``."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as e:
        raise ShapeError(f"take: {e} (shape {a.shape})") from None
    return _apply("take", np.array(out), (a,), lambda g, o: (scatter_add(g, index, a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])
    ax = axis % out.ndim

    def backward(g, o):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = tuple(slice(None) for _ in range(ax)) + (slice(int(lo), int(hi)),)
            grads.append(take(g, index))
        return tuple(grads)

    return _apply("concat", out, tuple(ts), backward)


def scatter_add(g, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` accumulated at ``index``; adjoint of :func:`take`."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _apply("scatter_add", out, (g,), lambda gg, o: (take(gg, index),))


# ---------------------------------------------------------------------------
# composite ops


def log_softmax(x, tau: float = 1.0, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x / tau if tau != 1.0 else x
    shift = Tensor._wrap(z.data.max(axis=axis, keepdims=True))
    zs = z - shift
    return zs - log(exp(zs).sum(axis=axis, keepdims=True))


def softmax(x, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` of ``x / tau``."""
    x = as_tensor(x)
    z = x / tau if tau != 1.0 else x
    shift = Tensor._wrap(z.data.max(axis=axis, keepdims=True))
    e = exp(z - shift)
    return e / e.sum(axis=axis, keepdims=True)


def sqdist(a, b) -> Tensor:
    """Squared Euclidean distance along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sqdist: shapes {a.shape} and {b.shape} differ")
    d = a - b
    return (d * d).sum(axis=-1)


# ---------------------------------------------------------------------------
# gradients


def _flatten(wrt):
    if isinstance(wrt, Tensor):
        return [wrt], lambda xs: xs[0]
    if isinstance(wrt, dict):
        keys = list(wrt)
        return [wrt[k] for k in keys], lambda xs: dict(zip(keys, xs))
    items = list(wrt)
    return items, lambda xs: type(wrt)(xs) if isinstance(wrt, tuple) else list(xs)


def grad(output: Tensor, wrt, create_graph: bool = False):
    """Gradient of a single-element ``output`` with respect to ``wrt``.

    ``wrt`` may be a tensor, a sequence of tensors or a dict of tensors; the
    result has the same structure. Tensors unreachable from ``output`` get
    zero gradients. With ``create_graph`` the backward ops are recorded so
    the returned gradients can themselves be differentiated.
    """
    targets, rebuild = _flatten(wrt)
    if output.size != 1:
        raise UsageError(f"grad needs a single-element output, got shape {output.shape}")

    leaf_ids = {id(t): i for i, t in enumerate(targets) if t.node_id is None}
    node_ids = {t.node_id: i for i, t in enumerate(targets) if t.node_id is not None}
    found: list[Tensor | None] = [None] * len(targets)

    def seed_like(t):
        return Tensor._wrap(np.ones(t.shape))

    if output.node_id is None:
        if not output.requires_grad:
            raise UsageError("output is not on an active tape")
        for t_id, i in leaf_ids.items():
            if t_id == id(output):
                found[i] = seed_like(output)
        return rebuild([f if f is not None else Tensor._wrap(np.zeros(t.shape)) for f, t in zip(found, targets)])

    tape = output.tape
    if tape is None or tape is not _active_tape():
        raise UsageError("output is not on the active tape")
    for t in targets:
        if t.node_id is not None and t.tape is not tape:
            raise UsageError("a requested tensor lives on a different tape")

    pending: dict[int, Tensor] = {output.node_id: seed_like(output)}
    with _grad_enabled(create_graph):
        for nid in range(output.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            if nid in node_ids:
                found[node_ids[nid]] = g
            node = tape.nodes[nid]
            if node.freed:
                raise UsageError(f"backward reached freed tape node {nid} ({node.op or 'released'})")
            in_grads = node.backward_fn(g, node.out)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node_id is None:
                    i = leaf_ids.get(id(inp))
                    if i is not None:
                        found[i] = ig if found[i] is None else found[i] + ig
                else:
                    prev = pending.get(inp.node_id)
                    pending[inp.node_id] = ig if prev is None else prev + ig

    out = []
    for f, t in zip(found, targets):
        if f is None:
            f = Tensor._wrap(np.zeros(t.shape))
        elif not create_graph:
            f = f.detach()
        out.append(f)
    return rebuild(out)


def _as_leaves(params):
    flat, rebuild = _flatten(params)
    leaves = [Tensor(p.data if isinstance(p, Tensor) else p, requires_grad=True) for p in flat]
    return leaves, rebuild


def inner_step(loss_fn, params, inner_lr: float, mode: GradMode | str):
    """One recorded plain gradient step ``params - inner_lr * grad(loss_fn)``.

    Must run inside an active tape with ``params`` as tracked leaves. In exact
    mode the step stays on the tape so later gradients flow through it; in
    first-order mode the adapted parameters are fresh leaves.
    """
    mode = GradMode.parse(mode)
    flat, rebuild = _flatten(params)
    exact = mode is GradMode.EXACT
    gs = grad(loss_fn(params), flat, create_graph=exact)
    if exact:
        return rebuild([p - inner_lr * g for p, g in zip(flat, gs)])
    return rebuild([Tensor._wrap(p.data - inner_lr * g.data).detach(requires_grad=True) for p, g in zip(flat, gs)])


def meta_gradient(loss_fn, params, adapted, mode: GradMode | str):
    """Gradient of ``loss_fn(adapted)`` with respect to the pre-step ``params``."""
    mode = GradMode.parse(mode)
    flat, rebuild = _flatten(params)
    aflat, _ = _flatten(adapted)
    value = loss_fn(adapted)
    if mode is GradMode.EXACT:
        if any(a.node_id is None and a not in flat for a in aflat if a.requires_grad):
            raise UsageError("exact meta-gradient needs adapted parameters recorded on the tape")
        return rebuild(grad(value, flat))
    return rebuild(grad(value, aflat))


def grad_through_update(loss_fn, params, inner_lr: float, mode: GradMode | str = GradMode.FIRST_ORDER,
                        inner_loss_fn=None):
    """Meta-gradient of ``loss_fn`` evaluated after one inner gradient step.

    The inner step uses ``inner_loss_fn`` (default ``loss_fn``). ``params`` is
    a sequence or dict of arrays; the gradient comes back as arrays in the
    same structure.
    """
    inner_loss_fn = loss_fn if inner_loss_fn is None else inner_loss_fn
    with Tape():
        leaves, rebuild = _as_leaves(params)
        p = rebuild(leaves)
        adapted = inner_step(inner_loss_fn, p, inner_lr, mode)
        g = meta_gradient(loss_fn, p, adapted, mode)
    flat, rebuild_g = _flatten(g)
    return rebuild_g([t.data for t in flat])


def finite_diff_check(loss_fn, params, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` takes tensors in the structure of ``params`` and returns a
    single-element tensor. It runs inside a tape in both passes, so it may
    take gradients internally.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape():
        leaves, rebuild = _as_leaves(params)
        analytic = [g.data for g in _flatten(grad(loss_fn(rebuild(leaves)), rebuild(leaves)))[0]]

    base = [np.array(t.data) for t in leaves]

    def value(arrays):
        with Tape():
            ts = [Tensor(a, requires_grad=True) for a in arrays]
            return loss_fn(rebuild(ts)).item()

    worst = 0.0
    for i, arr in enumerate(base):
        for j in np.ndindex(arr.shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i][j] += step
            minus[i][j] -= step
            numeric = (value(plus) - value(minus)) / (2 * step)
            a = analytic[i][j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
