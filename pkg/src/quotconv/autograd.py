"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Supports exactly the operations the equivariant layers need: two-operand
tensor contraction, index gathering with scatter-add backward, element-wise
nonlinearities, axis reductions, softmax, sparse weighted gathering, and
segment max. Operations executed inside a ``with Tape():`` block are
recorded; ``Tape.backward`` replays them in reverse. Outside a tape, the
same functions run as plain numpy (inference mode).

No implicit broadcasting: element-wise binary ops require identical shapes,
and shape changes go through ``expand`` / ``reshape`` / ``transpose``.
"""

from __future__ import annotations

import string
import threading

import numpy as np
import scipy.sparse
from scipy.special import expit


class ShapeMismatch(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class IndexOutOfRange(IndexError):
    """An index-table entry falls outside the target axis extent."""


class DomainError(ValueError):
    """Input lies outside the mathematical domain of the operation."""


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; backward traverses in reverse order.

    Recording order is a valid topological order because operations execute
    eagerly. A tape is single-threaded; independent tapes on separate
    threads do not interact (the active-tape stack is thread-local).
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn) -> None:
        out.requires_grad = True
        self._records.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients into ``.grad``."""
        if loss.shape != ():
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        _accumulate(loss, np.ones(()))
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Gradient buffers are only ever rebound (never mutated in place), so
    # aliasing the incoming array is safe and avoids large copies.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _maybe_record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _maybe_record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        _accumulate(a, g * b_data)
        _accumulate(b, g * a_data)

    return _maybe_record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        _accumulate(a, g / b_data)
        _accumulate(b, -g * a_data / (b_data * b_data))

    return _maybe_record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward(g):
        _accumulate(a, -g)

    return _maybe_record(out, (a,), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        _accumulate(a, g * c)

    return _maybe_record(out, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))

    def backward(g):
        _accumulate(a, g)

    return _maybe_record(out, (a,), backward)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis of ``a``."""
    if b.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {a.shape} with bias {b.shape}")
    out = Tensor(a.data + b.data)
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g.sum(axis=lead))

    return _maybe_record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# contraction


def _parse_contract_spec(spec: str, a_shape, b_shape):
    try:
        operands, out_sub = spec.split("->")
        sa, sb = operands.split(",")
    except ValueError as exc:
        raise ShapeMismatch(f"bad contraction spec {spec!r}") from exc
    for sub in (sa, sb, out_sub):
        if not all(c in string.ascii_letters for c in sub):
            raise ShapeMismatch(f"bad contraction spec {spec!r}")
    if len(set(sa)) != len(sa) or len(set(sb)) != len(sb):
        raise ShapeMismatch(f"repeated index within one operand in {spec!r}")
    if len(sa) != len(a_shape) or len(sb) != len(b_shape):
        raise ShapeMismatch(
            f"spec {spec!r} does not match ranks {len(a_shape)} and {len(b_shape)}"
        )
    if not set(out_sub) <= (set(sa) | set(sb)):
        raise ShapeMismatch(f"output index not present in inputs: {spec!r}")
    # Every input index must appear in the other operand or the output, so
    # each backward pass is itself a contraction of the same family.
    if not set(sa) <= (set(sb) | set(out_sub)):
        raise ShapeMismatch(f"index of first operand summed out alone: {spec!r}")
    if not set(sb) <= (set(sa) | set(out_sub)):
        raise ShapeMismatch(f"index of second operand summed out alone: {spec!r}")
    extents: dict[str, int] = {}
    for sub, shape in ((sa, a_shape), (sb, b_shape)):
        for c, n in zip(sub, shape):
            if extents.setdefault(c, n) != n:
                raise ShapeMismatch(f"index {c!r} has extents {extents[c]} and {n}")
    return sa, sb, out_sub


def contract(a: Tensor, b: Tensor, spec: str) -> Tensor:
    """Generalized two-operand contraction, einsum-style ``"ij,jk->ik"``."""
    sa, sb, so = _parse_contract_spec(spec, a.shape, b.shape)
    out = Tensor(np.einsum(spec, a.data, b.data, optimize=True))
    a_data, b_data = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.einsum(f"{so},{sb}->{sa}", g, b_data, optimize=True))
        if b.requires_grad:
            _accumulate(b, np.einsum(f"{so},{sa}->{sb}", g, a_data, optimize=True))

    return _maybe_record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# indexing and shape


def index_select(t: Tensor, axis: int, table: np.ndarray) -> Tensor:
    """Gather ``out[..., i, ...] = t[..., table[i], ...]`` along ``axis``.

    The backward pass scatter-adds, so non-bijective tables are legal.
    """
    table = np.asarray(table)
    if table.ndim != 1 or not np.issubdtype(table.dtype, np.integer):
        raise IndexOutOfRange("index table must be a 1-D integer array")
    extent = t.shape[axis]
    if table.size and (table.min() < 0 or table.max() >= extent):
        raise IndexOutOfRange(f"table entries outside [0, {extent})")
    out = Tensor(np.take(t.data, table, axis=axis))
    shape = t.shape

    def backward(g):
        buf = np.zeros(shape, dtype=np.float64)
        np.add.at(np.moveaxis(buf, axis, 0), table, np.moveaxis(g, axis, 0))
        _accumulate(t, buf)

    return _maybe_record(out, (t,), backward)


def expand(t: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` by repetition."""
    out = Tensor(np.repeat(np.expand_dims(t.data, axis), n, axis=axis))

    def backward(g):
        _accumulate(t, g.sum(axis=axis))

    return _maybe_record(out, (t,), backward)


def transpose(t: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeMismatch(f"bad axes {axes} for rank {t.ndim}")
    out = Tensor(np.transpose(t.data, axes))
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(t, np.transpose(g, inverse))

    return _maybe_record(out, (t,), backward)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(t.data.reshape(shape))
    old = t.shape

    def backward(g):
        _accumulate(t, g.reshape(old))

    return _maybe_record(out, (t,), backward)


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.ndim != b.ndim:
        raise ShapeMismatch(f"concat ranks {a.ndim} and {b.ndim}")
    for i, (na, nb) in enumerate(zip(a.shape, b.shape)):
        if i != axis % a.ndim and na != nb:
            raise ShapeMismatch(f"concat: shapes {a.shape} and {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    split = a.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        _accumulate(a, ga)
        _accumulate(b, gb)

    return _maybe_record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# element-wise nonlinearities


def _drelu(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(np.float64)


def relu(t: Tensor) -> Tensor:
    out = Tensor(np.maximum(t.data, 0.0))
    x = t.data

    def backward(g):
        _accumulate(t, g * _drelu(x))

    return _maybe_record(out, (t,), backward)


def leaky_relu(t: Tensor, alpha: float = 0.1) -> Tensor:
    alpha = float(alpha)
    x = t.data
    out = Tensor(np.where(x > 0, x, alpha * x))

    def backward(g):
        _accumulate(t, g * np.where(x > 0, 1.0, alpha))

    return _maybe_record(out, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    s = expit(t.data)
    out = Tensor(s)

    def backward(g):
        _accumulate(t, g * s * (1.0 - s))

    return _maybe_record(out, (t,), backward)


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    out = Tensor(np.log(t.data))
    x = t.data

    def backward(g):
        _accumulate(t, g / x)

    return _maybe_record(out, (t,), backward)


def exp(t: Tensor) -> Tensor:
    e = np.exp(t.data)
    out = Tensor(e)

    def backward(g):
        _accumulate(t, g * e)

    return _maybe_record(out, (t,), backward)


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0.0):
        raise DomainError("sqrt requires non-negative inputs")
    r = np.sqrt(t.data)
    out = Tensor(r)

    def backward(g):
        _accumulate(t, g * 0.5 / r)

    return _maybe_record(out, (t,), backward)


def reciprocal(t: Tensor) -> Tensor:
    out = Tensor(1.0 / t.data)
    x = t.data

    def backward(g):
        _accumulate(t, -g / (x * x))

    return _maybe_record(out, (t,), backward)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-free form."""
    x = t.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(t, g * expit(x))

    return _maybe_record(out, (t,), backward)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(set(axes)) != len(axes):
        raise ShapeMismatch(f"repeated reduction axis in {axes}")
    return axes


def _sorted_axis_sum(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    # Summing in sorted order makes the result exactly invariant to any
    # relabeling along the reduced axes (needed for permutation-stable
    # normalization statistics).
    moved = np.moveaxis(x, axes, range(len(axes)))
    flat = moved.reshape(-1, *moved.shape[len(axes):])
    return np.sort(flat, axis=0).sum(axis=0)


def reduce_sum(t: Tensor, axes, stable: bool = False) -> Tensor:
    axes = _normalize_axes(axes, t.ndim)
    if stable:
        out = Tensor(_sorted_axis_sum(t.data, axes))
    else:
        out = Tensor(t.data.sum(axis=axes))
    shape = t.shape

    def backward(g):
        ge = np.expand_dims(g, axes)
        _accumulate(t, np.broadcast_to(ge, shape).copy())

    return _maybe_record(out, (t,), backward)


def reduce_mean(t: Tensor, axes, stable: bool = False) -> Tensor:
    axes = _normalize_axes(axes, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    return scale(reduce_sum(t, axes, stable=stable), 1.0 / count)


def reduce_max(t: Tensor, axes) -> Tensor:
    """Max over ``axes``; the backward routes to the first argmax."""
    axes = _normalize_axes(axes, t.ndim)
    moved = np.moveaxis(t.data, axes, range(-len(axes), 0))
    kept_shape = moved.shape[: t.ndim - len(axes)]
    flat = moved.reshape(int(np.prod(kept_shape)) if kept_shape else 1, -1)
    arg = flat.argmax(axis=1)
    out = Tensor(flat[np.arange(flat.shape[0]), arg].reshape(kept_shape))
    shape = t.shape

    def backward(g):
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        buf = buf.reshape(moved.shape)
        buf = np.moveaxis(buf, range(-len(axes), 0), axes)
        _accumulate(t, buf.reshape(shape))

    return _maybe_record(out, (t,), backward)


def softmax(t: Tensor, axis: int) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(t, s * (g - dot))

    return _maybe_record(out, (t,), backward)


# ---------------------------------------------------------------------------
# structured gathering


def sparse_gather(t: Tensor, mat: scipy.sparse.csr_matrix,
                  mat_t: scipy.sparse.csr_matrix | None = None) -> Tensor:
    """Linear gather ``out = mat @ t`` along the first axis.

    ``t`` has shape (N, ...); ``mat`` is (M, N) with constant entries
    (geometry weights). ``mat_t`` optionally supplies a precomputed
    transpose for the backward pass.
    """
    n = t.shape[0]
    if mat.shape[1] != n:
        raise ShapeMismatch(f"gather matrix {mat.shape} vs leading extent {n}")
    trailing = t.shape[1:]
    flat = t.data.reshape(n, -1)
    out = Tensor((mat @ flat).reshape(mat.shape[0], *trailing))
    if mat_t is None:
        mat_t = mat.T.tocsr()

    def backward(g):
        _accumulate(t, (mat_t @ g.reshape(mat.shape[0], -1)).reshape(n, *trailing))

    return _maybe_record(out, (t,), backward)


def segment_max(t: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment max along the first axis; first argmax takes the gradient."""
    segment_ids = np.asarray(segment_ids)
    if segment_ids.shape != (t.shape[0],):
        raise ShapeMismatch("segment_ids must match the leading axis")
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise IndexOutOfRange("segment id outside range")
    order = np.argsort(segment_ids, kind="stable")
    sorted_ids = segment_ids[order]
    starts = np.searchsorted(sorted_ids, np.arange(num_segments), side="left")
    ends = np.searchsorted(sorted_ids, np.arange(num_segments), side="right")
    trailing = t.shape[1:]
    flat = t.data.reshape(t.shape[0], -1)
    out_flat = np.empty((num_segments, flat.shape[1]))
    arg = np.empty((num_segments, flat.shape[1]), dtype=np.int64)
    for s in range(num_segments):
        members = order[starts[s]:ends[s]]
        if members.size == 0:
            raise ShapeMismatch(f"segment {s} is empty")
        block = flat[members]
        out_flat[s] = block.max(axis=0)
        arg[s] = members[block.argmax(axis=0)]
    out = Tensor(out_flat.reshape(num_segments, *trailing))
    shape = t.shape

    def backward(g):
        buf = np.zeros((shape[0], flat.shape[1]))
        cols = np.broadcast_to(np.arange(flat.shape[1]), arg.shape)
        np.add.at(buf, (arg, cols), g.reshape(num_segments, -1))
        _accumulate(t, buf.reshape(shape))

    return _maybe_record(out, (t,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


class GradCheckReport:
    """Outcome of a central-difference comparison against reverse mode."""

    def __init__(self):
        self.max_rel_err = 0.0
        self.checked = 0
        self.entries: list[tuple[int, int, float, float, float]] = []

    def record(self, param_i, coord, analytic, numeric, rel):
        self.entries.append((param_i, coord, analytic, numeric, rel))
        self.max_rel_err = max(self.max_rel_err, rel)
        self.checked += 1

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_err < tol

    def __repr__(self):
        return f"GradCheckReport(checked={self.checked}, max_rel_err={self.max_rel_err:.3e})"


def grad_check(f, params: list[Tensor], step: float = 1e-5,
               max_coords: int = 200, rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` to central differences.

    Samples up to ``max_coords`` coordinates per parameter. Relative error is
    normalized by the largest gradient magnitude seen for that parameter, so
    zero-gradient coordinates do not blow up the ratio.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport()
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        a_flat = analytic[pi].reshape(-1)
        scale_ref = max(np.abs(a_flat).max(), 1e-8)
        for c in coords:
            saved = flat[c]
            flat[c] = saved + step
            hi = f().item()
            flat[c] = saved - step
            lo = f().item()
            flat[c] = saved
            numeric = (hi - lo) / (2.0 * step)
            rel = abs(a_flat[c] - numeric) / max(abs(a_flat[c]), abs(numeric), scale_ref)
            report.record(pi, int(c), float(a_flat[c]), float(numeric), float(rel))
    return report


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
