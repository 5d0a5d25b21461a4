"""Reverse-mode automatic differentiation over dense float64 tensors.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, which is already a valid topological order.  ``backward``
walks the tape once in reverse and accumulates vector-Jacobian products.

Backward rules live in the ``BACKWARD`` table keyed by op name so they can
be inspected (and, in tests, deliberately broken) without touching the
forward code.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_TAPES: list["Tape"] = []
# stop_gradient replay buffer, used by finite-difference checks of
# straight-through graphs (see ``frozen_stop_gradients``)
_SG_REPLAY: list | None = None
_SG_RECORD: list | None = None


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar("item", self)
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; python numbers route to the scalar ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(Tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(op: str, t: Tensor):
    raise ShapeError(f"{op}: expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: object = None


@dataclass
class Tape:
    """Ordered record of executed differentiable operations."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def gradient(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> "GradientMap":
        if loss.data.size != 1:
            _not_scalar("backward", loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        produced = set()
        for rec in reversed(self.records):
            produced.add(id(rec.output))
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = BACKWARD[rec.op](g, rec)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    leaves[key] = inp
        if id(loss) not in produced and not loss.requires_grad and params is None:
            # with explicit params a constant loss just has zero gradients
            raise RuntimeError("backward: loss was not produced on this tape")
        if id(loss) not in produced:
            # the loss is itself a leaf
            leaves[id(loss)] = loss
        out = GradientMap()
        for key, t in leaves.items():
            if key in grads:
                out[t] = grads[key]
        if params is not None:
            for p in params:
                if p not in out:
                    out[p] = np.zeros_like(p.data)
        return out


class GradientMap(dict):
    """Parameter tensor -> gradient array of identical shape."""


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tape: Tape | None = None) -> GradientMap:
    if loss.data.size != 1:
        _not_scalar("backward", loss)
    tape = tape or (_TAPES[-1] if _TAPES else None)
    if tape is None:
        raise RuntimeError("backward: no active tape")
    return tape.gradient(loss, params)


def no_record() -> contextlib.AbstractContextManager:
    """Suspend recording on all active tapes."""

    @contextlib.contextmanager
    def _ctx():
        saved = _TAPES[:]
        _TAPES.clear()
        try:
            yield
        finally:
            _TAPES.extend(saved)

    return _ctx()


def _emit(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], ctx=None) -> Tensor:
    out = Tensor._wrap(arr)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append(Record(op, inputs, out, ctx))
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()) if t.ndim == 0 and g.ndim != 0 else g


BACKWARD: dict[str, Callable[[np.ndarray, Record], Sequence[np.ndarray | None]]] = {}


def _rule(name: str):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, b)
    _check_same("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


@_rule("add")
def _add_bw(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g, a), _unbroadcast(g, b)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -b)
    _check_same("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b))


@_rule("sub")
def _sub_bw(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g, a), _unbroadcast(-g, b)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


@_rule("mul")
def _mul_bw(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with the denominator clamped to at least EPS."""
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_same("div", a, b)
    den = np.maximum(b.data, EPS)
    return _emit("div", a.data / den, (a, b), den)


@_rule("div")
def _div_bw(g, rec):
    a, b = rec.inputs
    den = rec.ctx
    gb = np.where(b.data > EPS, -g * a.data / (den * den), 0.0)
    return _unbroadcast(g / den, a), _unbroadcast(gb, b)


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _emit("add_scalar", a.data + float(s), (a,))


@_rule("add_scalar")
def _add_scalar_bw(g, rec):
    return (g,)


def scale(a: Tensor, s: float) -> Tensor:
    return _emit("scale", a.data * float(s), (a,), float(s))


@_rule("scale")
def _scale_bw(g, rec):
    return (g * rec.ctx,)


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,))


@_rule("neg")
def _neg_bw(g, rec):
    return (-g,)


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,))


@_rule("square")
def _square_bw(g, rec):
    return (2.0 * g * rec.inputs[0].data,)


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return _emit("abs", np.abs(a.data), (a,))


@_rule("abs")
def _abs_bw(g, rec):
    return (g * np.sign(rec.inputs[0].data),)


def exp(a: Tensor) -> Tensor:
    return _emit("exp", np.exp(a.data), (a,))


@_rule("exp")
def _exp_bw(g, rec):
    return (g * rec.output.data,)


def log(a: Tensor) -> Tensor:
    """``log(max(a, EPS))``; zero gradient where the clamp is active."""
    return _emit("log", np.log(np.maximum(a.data, EPS)), (a,))


@_rule("log")
def _log_bw(g, rec):
    x = rec.inputs[0].data
    return (np.where(x > EPS, g / np.maximum(x, EPS), 0.0),)


def relu(a: Tensor) -> Tensor:
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


@_rule("relu")
def _relu_bw(g, rec):
    # subgradient at exactly 0 is 0
    return (g * (rec.inputs[0].data > 0.0),)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", out, (a,))


@_rule("sigmoid")
def _sigmoid_bw(g, rec):
    s = rec.output.data
    return (g * s * (1.0 - s),)


def maximum(a: Tensor, s: float) -> Tensor:
    """Elementwise ``max(a, s)`` against a scalar."""
    return _emit("maximum", np.maximum(a.data, float(s)), (a,), float(s))


@_rule("maximum")
def _maximum_bw(g, rec):
    return (g * (rec.inputs[0].data > rec.ctx),)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward, zero gradient backward."""
    if _SG_REPLAY is not None:
        return Tensor._wrap(_SG_REPLAY.pop(0))
    if _SG_RECORD is not None:
        _SG_RECORD.append(a.data.copy())
    return Tensor._wrap(a.data.copy())


@contextlib.contextmanager
def frozen_stop_gradients(values: list | None = None):
    """Record (``values is None``) or replay stop_gradient outputs.

    Finite differences of a graph containing stop_gradient only agree with
    the analytic gradient if the stopped values are held at the point of
    linearisation.  Run once under a recording context, then evaluate the
    perturbed forwards under a replay context built from the recording.
    """
    global _SG_REPLAY, _SG_RECORD
    if values is None:
        _SG_RECORD = recorded = []
        try:
            yield recorded
        finally:
            _SG_RECORD = None
    else:
        _SG_REPLAY = list(values)
        try:
            yield values
        finally:
            _SG_REPLAY = None


# ------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b))


@_rule("matmul")
def _matmul_bw(g, rec):
    a, b = rec.inputs
    return g @ b.data.T, a.data.T @ g


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a ``[m]`` bias to every row of an ``[n, m]`` matrix."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: shape mismatch {x.shape} vs {b.shape}")
    return _emit("bias_add", x.data + b.data, (x, b))


@_rule("bias_add")
def _bias_add_bw(g, rec):
    return g, g.sum(axis=0)


# ------------------------------------------------------------------ reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return _emit("sum", np.asarray(a.data.sum(axis=axis)), (a,), axis)


@_rule("sum")
def _sum_bw(g, rec):
    x = rec.inputs[0].data
    axis = rec.ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("mean: empty tensor")
    return _emit("mean", np.asarray(a.data.mean(axis=axis)), (a,), axis)


@_rule("mean")
def _mean_bw(g, rec):
    x = rec.inputs[0].data
    axis = rec.ctx
    n = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of an ``[n, k]`` matrix."""
    if a.ndim != 2:
        raise ShapeError(f"softmax: expected a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return _emit("softmax", e / e.sum(axis=1, keepdims=True), (a,))


@_rule("softmax")
def _softmax_bw(g, rec):
    s = rec.output.data
    return (s * (g - (g * s).sum(axis=1, keepdims=True)),)


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        arr = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", arr, (a,))


@_rule("reshape")
def _reshape_bw(g, rec):
    return (g.reshape(rec.inputs[0].shape),)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    shapes = [p.shape for p in parts]
    try:
        arr = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shape mismatch {shapes}") from None
    return _emit("concat", arr, tuple(parts), (axis, [s[axis] for s in shapes]))


@_rule("concat")
def _concat_bw(g, rec):
    axis, sizes = rec.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def column(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of an ``[n, k]`` matrix as an ``[n]`` vector."""
    if a.ndim != 2 or not -a.shape[1] <= j < a.shape[1]:
        raise ShapeError(f"column: index {j} out of range for shape {a.shape}")
    return _emit("column", a.data[:, j].copy(), (a,), j)


@_rule("column")
def _column_bw(g, rec):
    out = np.zeros(rec.inputs[0].shape)
    out[:, rec.ctx] = g
    return (out,)


# ---------------------------------------------------------------- batch norm


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalise each column of ``x`` with its batch statistics.

    Returns the output tensor and the (biased) batch mean and variance.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shape mismatch {x.shape} vs {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _emit("batch_norm_train", xhat * gamma.data + beta.data, (x, gamma, beta), (xhat, inv))
    return out, mu, var


@_rule("batch_norm_train")
def _bn_train_bw(g, rec):
    x, gamma, _ = rec.inputs
    xhat, inv = rec.ctx
    dxhat = g * gamma.data
    dx = inv * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean_: np.ndarray, var: np.ndarray, eps: float = 1e-5):
    if x.ndim != 2 or gamma.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: shape mismatch {x.shape} vs {gamma.shape}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean_) * inv
    return _emit("batch_norm_eval", xhat * gamma.data + beta.data, (x, gamma, beta), (xhat, inv))


@_rule("batch_norm_eval")
def _bn_eval_bw(g, rec):
    _, gamma, _ = rec.inputs
    xhat, inv = rec.ctx
    return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)
