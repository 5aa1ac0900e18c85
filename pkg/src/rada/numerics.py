"""Dense float64 tensors with a reverse-mode gradient tape.

Everything is desk-scale: tensors hold at most three axes, storage is
row-major and contiguous, and there are no views, strides, or implicit
broadcasting. The only sanctioned mutation of a tensor after construction
is an optimizer writing into ``.data`` between tapes. Gradients produced
by :class:`GradTape` are checked against the central finite-difference
oracle in :func:`finite_diff_check`, which is kept independent of the tape.

A tape is confined to one thread of control; the active-tape stack is
thread-local, so parallel evaluation with independent tapes is safe.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, OracleError, ShapeError

_MAX_AXES = 3
_ZERO_ROW_FLOOR = 1e-150


class Tensor:
    """A contiguous float64 array plus a ``requires_grad`` flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim > _MAX_AXES:
            raise ShapeError(f"tensors support at most {_MAX_AXES} axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detached(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars go through the dedicated scalar primitives so
    # the tape only ever records one op kind per record.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)


class _Record:
    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs, output, grad_fn):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_LOCAL = threading.local()


def _stack() -> list:
    tapes = getattr(_LOCAL, "tapes", None)
    if tapes is None:
        tapes = []
        _LOCAL.tapes = tapes
    return tapes


def _active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class GradTape:
    """Ordered record of primitive ops; replays them in reverse on backward.

    ``backward`` may be called repeatedly and recomputes the gradient map
    from scratch each time, so two passes over the same tape are
    bit-identical.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape exited out of order")

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            gout = grads.get(id(rec.output))
            if gout is None:
                continue
            for tensor, gin in rec.grad_fn(gout):
                if gin is None or not tensor.requires_grad:
                    continue
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = np.array(gin, dtype=np.float64, copy=True)
                else:
                    acc += gin
        self._grads = grads

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Accumulated gradient of the last ``backward`` for a learnable tensor.

        Leaves that require grad but never touched the loss get exact zeros.
        Asking for the gradient of a detached tensor is a contract violation.
        """
        if not tensor.requires_grad:
            raise ContractError("gradient requested for a tensor with requires_grad=False")
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return np.array(g, copy=True)


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    arr = np.asarray(out_data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags.c_contiguous:
        arr = np.array(arr, order="C")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(inputs, out, grad_fn))
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return _emit((a, b), a.data + b.data, lambda g: ((a, g), (b, g)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    return _emit((a, b), a.data - b.data, lambda g: ((a, g), (b, -g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return _emit((a, b), a.data * b.data, lambda g: ((a, g * b.data), (b, g * a.data)))


def neg(a: Tensor) -> Tensor:
    return _emit((a,), -a.data, lambda g: ((a, -g),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((a,), a.data + c, lambda g: ((a, g),))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit((a,), a.data * c, lambda g: ((a, g * c),))


def absolute(a: Tensor) -> Tensor:
    return _emit((a,), np.abs(a.data), lambda g: ((a, g * np.sign(a.data)),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit((a,), y, lambda g: ((a, g * (1.0 - y * y)),))


def xlogx(a: Tensor) -> Tensor:
    """Entrywise ``x * log(x)`` with the limit value 0 at x == 0.

    The gradient at exactly zero is defined as 0 (boundary convention);
    callers feed softmax outputs, which are zero only through underflow.
    """
    if np.any(a.data < 0.0):
        raise DegenerateInputError("xlogx requires nonnegative entries")
    pos = a.data > 0.0
    y = np.zeros_like(a.data)
    np.multiply(a.data, np.log(a.data, where=pos, out=np.zeros_like(a.data)), out=y, where=pos)

    def grad(g):
        d = np.zeros_like(a.data)
        np.log(a.data, where=pos, out=d)
        d[pos] += 1.0
        return ((a, g * d),)

    return _emit((a,), y, grad)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return _emit(
        (a, b),
        a.data @ b.data,
        lambda g: ((a, g @ b.data.T), (b, a.data.T @ g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")
    return _emit((a,), a.data.T, lambda g: ((a, np.ascontiguousarray(g.T)),))


def take_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"take_row needs a 2-D operand, got {a.shape}")
    i = int(i)

    def grad(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return ((a, full),)

    return _emit((a,), a.data[i], grad)


def repeat_row(v: Tensor, n: int) -> Tensor:
    if v.data.ndim != 1:
        raise ShapeError(f"repeat_row needs a 1-D operand, got {v.shape}")
    n = int(n)
    return _emit((v,), np.tile(v.data, (n, 1)), lambda g: ((v, g.sum(axis=0)),))


def take_plane(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 3:
        raise ShapeError(f"take_plane needs a 3-D operand, got {a.shape}")
    i = int(i)

    def grad(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return ((a, full),)

    return _emit((a,), a.data[i], grad)


def stack_planes(planes: Sequence[Tensor]) -> Tensor:
    planes = tuple(planes)
    if not planes:
        raise ShapeError("stack_planes needs at least one plane")
    first = planes[0].shape
    for p in planes:
        if p.data.ndim != 2 or p.shape != first:
            raise ShapeError(f"stack_planes needs equal 2-D shapes, got {first} and {p.shape}")

    def grad(g):
        return tuple((p, np.ascontiguousarray(g[i])) for i, p in enumerate(planes))

    return _emit(planes, np.stack([p.data for p in planes]), grad)


def rational_product(features: Tensor, classes: Tensor) -> Tensor:
    """Entrywise products out[b, i, j] = features[b, j] * classes[i, j]."""
    if features.data.ndim != 2 or classes.data.ndim != 2:
        raise ShapeError(
            f"rational_product needs 2-D operands, got {features.shape} and {classes.shape}"
        )
    if features.shape[1] != classes.shape[1]:
        raise ShapeError(
            f"rational_product width mismatch: {features.shape} vs {classes.shape}"
        )
    out = np.einsum("bj,ij->bij", features.data, classes.data)

    def grad(g):
        gf = np.einsum("bij,ij->bj", g, classes.data)
        gh = np.einsum("bij,bj->ij", g, features.data)
        return ((features, gf), (classes, gh))

    return _emit((features, classes), out, grad)


# ---------------------------------------------------------------------------
# reductions


def sum_lastdim(a: Tensor) -> Tensor:
    if a.data.ndim < 1:
        raise ShapeError("sum_lastdim needs at least one axis")
    n = a.shape[-1]
    return _emit(
        (a,),
        a.data.sum(axis=-1),
        lambda g: ((a, np.repeat(g[..., None], n, axis=-1)),),
    )


def sum_all(a: Tensor) -> Tensor:
    return _emit((a,), np.asarray(a.data.sum()), lambda g: ((a, np.full_like(a.data, float(g))),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit(
        (a,),
        np.asarray(a.data.mean()),
        lambda g: ((a, np.full_like(a.data, float(g) / n)),),
    )


def mean_axis0(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"mean_axis0 needs a 2-D operand, got {a.shape}")
    n = a.shape[0]
    return _emit(
        (a,),
        a.data.mean(axis=0),
        lambda g: ((a, np.tile(g / n, (n, 1))),),
    )


def max_all(a: Tensor) -> Tensor:
    """Global maximum; the gradient routes to the first argmax in C order."""
    flat_idx = int(np.argmax(a.data))

    def grad(g):
        full = np.zeros_like(a.data)
        full.reshape(-1)[flat_idx] = float(g)
        return ((a, full),)

    return _emit((a,), np.asarray(a.data.max()), grad)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Pick a[i, indices[i]] for every row i."""
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D operand, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows needs one index per row, got {idx.shape} for {a.shape}")
    if np.any(idx < 0) or np.any(idx >= a.shape[1]):
        raise ContractError(f"gather index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def grad(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return ((a, full),)

    return _emit((a,), a.data[rows, idx], grad)


# ---------------------------------------------------------------------------
# stable nonlinear blocks


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    if a.data.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim needs a nonempty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((a, y * (g - inner)),)

    return _emit((a,), y, grad)


def logsumexp_lastdim(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"logsumexp_lastdim needs a 2-D operand, got {a.shape}")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    out = (m + np.log(e.sum(axis=-1, keepdims=True)))[:, 0]
    soft = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return ((a, soft * g[:, None]),)

    return _emit((a,), out, grad)


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Scale every row of a 2-D tensor to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows needs a 2-D operand, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms < _ZERO_ROW_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has (near-)zero norm; cannot normalize")
    y = a.data / norms

    def grad(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((a, (g - y * inner) / norms),)

    return _emit((a,), y, grad)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``f`` maps a list of parameter tensors to a scalar tensor. The analytic
    side runs once under a fresh tape; the numeric side re-evaluates ``f``
    outside any tape with one coordinate nudged by +-h. The relative error at
    each coordinate is |analytic - fd| / (|analytic| + |fd| + 1e-12).
    """
    if h <= 0.0:
        raise OracleError(f"finite-difference step must be positive, got {h}")
    params = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True) for p in params]

    def eval_scalar(ps: list[Tensor]) -> float:
        out = f(ps)
        if not isinstance(out, Tensor) or out.size != 1:
            raise OracleError("objective must return a scalar tensor")
        v = float(out.data.reshape(()))
        if not math.isfinite(v):
            raise OracleError(f"objective evaluated to a non-finite value: {v}")
        return v

    with GradTape() as tape:
        loss = f(list(params))
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise OracleError("objective must return a scalar tensor")
        if not math.isfinite(float(loss.data.reshape(()))):
            raise OracleError("objective evaluated to a non-finite value")
    tape.backward(loss)
    analytic = [tape.gradient(p) if p.requires_grad else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        if not p.requires_grad:
            continue
        base = p.data.reshape(-1)
        a_flat = analytic[pi].reshape(-1)
        for k in range(base.size):
            plus = [q for q in params]
            minus = [q for q in params]
            arr_plus = np.array(p.data, copy=True)
            arr_minus = np.array(p.data, copy=True)
            arr_plus.reshape(-1)[k] += h
            arr_minus.reshape(-1)[k] -= h
            plus[pi] = Tensor(arr_plus)
            minus[pi] = Tensor(arr_minus)
            fd = (eval_scalar(plus) - eval_scalar(minus)) / (2.0 * h)
            a = float(a_flat[k])
            rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-12)
            worst = max(worst, rel)
    return worst
