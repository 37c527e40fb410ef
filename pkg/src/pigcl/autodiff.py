"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Eager tape: every operation executes immediately on numpy arrays and appends
a backward closure to the active tape. ``Tape.backward`` replays the closures
in exact reverse insertion order, accumulating gradients additively, so a
tensor consumed by several downstream ops receives the sum of its branch
gradients.

Deliberately small scope: scalar roots only, first-order gradients only, and
no broadcasting beyond scalars and row-vector-over-matrix. Everything is
float64; tensors on a tape are never mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from scipy.special import expit

EPS_NUM = 1e-12


class ShapeMismatchError(ValueError):
    """Operands with incompatible shapes, reported with op name and shapes."""


class NumericalDomainError(ValueError):
    """Input outside an op's domain (e.g. log of a non-positive value)."""


class NonFiniteError(FloatingPointError):
    """A forward result contained NaN/Inf while finite-checking was enabled."""


class Tensor:
    """Dense float64 array with an optional slot on a differentiation tape."""

    __slots__ = ("values", "grad", "tape", "requires_grad", "name")

    def __init__(self, values, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.requires_grad = False
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.values.shape}{tag} requires_grad={self.requires_grad}>"

    # Operator sugar; the module-level functions are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Execution-ordered record of ops with backward closures.

    ``strict=True`` makes domain violations (log of non-positive, zero-norm
    rows) raise; ``strict=False`` clamps at ``EPS_NUM`` instead, which is the
    training-mode behaviour. ``check_finite`` validates every forward result
    and is intended for debugging runs.
    """

    def __init__(self, strict: bool = True, check_finite: bool = False):
        self.strict = strict
        self.check_finite = check_finite
        self._records: list = []
        self.params: list[Tensor] = []

    def watch(self, tensor: Tensor, name: str | None = None) -> Tensor:
        """Register a leaf tensor as a trainable parameter on this tape."""
        tensor.tape = self
        tensor.requires_grad = True
        tensor.grad = None
        if name is not None:
            tensor.name = name
        self.params.append(tensor)
        return tensor

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def num_ops(self) -> int:
        return len(self._records)

    def release(self) -> None:
        """Drop the op records and detach watched parameters.

        Records hold output tensors which point back at the tape, a reference
        cycle the reference-counting collector cannot free; a long training
        loop that skips this accumulates whole epoch graphs until the cyclic
        collector happens to run. Call once the gradients have been consumed.
        """
        self._records.clear()
        for p in self.params:
            p.tape = None
        self.params.clear()

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(tensor) for every tensor reachable from root."""
        if root.values.shape != ():
            raise ValueError(f"backward root must be scalar, got shape {root.values.shape}")
        if root.tape is not self:
            raise ValueError("backward root was not recorded on this tape")
        root.grad = np.array(1.0)
        for _, out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for tensor, g in zip(inputs, grads):
                if g is None or not tensor.requires_grad:
                    continue
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs, op: str) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError(f"{op}: inputs live on different tapes")
    return tape


def custom_op(op: str, out_values: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Record an op with caller-supplied forward values and backward closure.

    ``backward_fn(g)`` must return one gradient (or None) per input, in order.
    This is the extension point every built-in op goes through.
    """
    tape = _tape_of(inputs, op)
    out = Tensor(np.asarray(out_values, dtype=np.float64))
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.check_finite and not np.all(np.isfinite(out.values)):
            raise NonFiniteError(f"{op}: non-finite values in forward result")
        out.tape = tape
        out.requires_grad = True
        tape._records.append((op, out, tuple(inputs), backward_fn))
    return out


def _strict(inputs) -> bool:
    tape = _tape_of(inputs, "mode")
    return True if tape is None else tape.strict


# ---------------------------------------------------------------------------
# elementwise binary ops (same shape, row-vector broadcast, or scalar)

def _check_binary_shapes(op: str, va: np.ndarray, vb: np.ndarray) -> None:
    if va.shape == vb.shape or va.ndim == 0 or vb.ndim == 0:
        return
    if va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
        return
    if vb.ndim == 2 and va.ndim == 1 and vb.shape[1] == va.shape[0]:
        return
    raise ShapeMismatchError(f"{op}: incompatible shapes {va.shape} and {vb.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("add", a.values, b.values)

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return custom_op("add", a.values + b.values, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("sub", a.values, b.values)

    def backward(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return custom_op("sub", a.values - b.values, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes("mul", a.values, b.values)
    va, vb = a.values, b.values

    def backward(g):
        ga = _unbroadcast(g * vb, va.shape) if a.requires_grad else None
        gb = _unbroadcast(g * va, vb.shape) if b.requires_grad else None
        return ga, gb

    return custom_op("mul", va * vb, (a, b), backward)


def negate(a) -> Tensor:
    a = _as_tensor(a)
    return custom_op("negate", -a.values, (a,), lambda g: (-g,))


def scale_by_constant(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return custom_op("scale_by_constant", a.values * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.exp(a.values)
    return custom_op("exp", out_values, (a,), lambda g: (g * out_values,))


def exp_scaled(a, c: float) -> Tensor:
    """exp(c * a) as one op; halves the large temporaries of scale-then-exp."""
    a = _as_tensor(a)
    c = float(c)
    out_values = np.exp(c * a.values)
    return custom_op("exp_scaled", out_values, (a,), lambda g: (g * out_values * c,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    if np.any(v <= 0.0):
        if _strict((a,)):
            raise NumericalDomainError(f"log: non-positive input (min {v.min():.6g})")
        v = np.maximum(v, EPS_NUM)
    return custom_op("log", np.log(v), (a,), lambda g: (g / v,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0.0
    return custom_op("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def prelu(a, slope) -> Tensor:
    """x for x > 0 and slope * x otherwise; one slope per channel (last axis)."""
    a, slope = _as_tensor(a), _as_tensor(slope)
    va, vs = a.values, slope.values
    if vs.ndim != 1 or va.shape[-1] != vs.shape[0]:
        raise ShapeMismatchError(f"prelu: slope {vs.shape} does not match input {va.shape}")
    pos = va > 0.0
    neg_part = np.where(pos, 0.0, va)
    out_values = np.where(pos, va, vs * va)

    def backward(g):
        ga = g * np.where(pos, 1.0, vs)
        gs = g * neg_part
        if va.ndim == 2:
            gs = gs.sum(axis=0)
        return ga, gs

    return custom_op("prelu", out_values, (a, slope), backward)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out_values = np.logaddexp(0.0, a.values)
    s = expit(a.values)
    return custom_op("softplus", out_values, (a,), lambda g: (g * s,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.values)
    return custom_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return custom_op("clamp", np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


def power_const(a, p: float) -> Tensor:
    """a ** p for constant p; defined for positive inputs."""
    a = _as_tensor(a)
    v = a.values
    if np.any(v <= 0.0) and p < 1.0:
        if _strict((a,)):
            raise NumericalDomainError(f"power_const: non-positive base with p={p}")
        v = np.maximum(v, EPS_NUM)
    out_values = np.power(v, p)
    return custom_op("power_const", out_values, (a,), lambda g: (g * p * np.power(v, p - 1.0),))


# ---------------------------------------------------------------------------
# reductions and reshaping

def sum_(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.values.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return custom_op("sum", a.values.sum(axis=axis), (a,), backward)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.values.shape
    count = a.values.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape),)

    return custom_op("mean", a.values.mean(axis=axis), (a,), backward)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    old = a.values.shape
    return custom_op("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d input, got {a.values.shape}")
    return custom_op("transpose", a.values.T, (a,), lambda g: (g.T,))


def concat_rows(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[1]:
        raise ShapeMismatchError(
            f"concat_rows: incompatible shapes {a.values.shape} and {b.values.shape}")
    na = a.values.shape[0]

    def backward(g):
        return g[:na], g[na:]

    return custom_op("concat_rows", np.vstack([a.values, b.values]), (a, b), backward)


def row_gather(a, index) -> Tensor:
    """a[index] along the first axis; backward scatter-adds into the source."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return (out,)

    return custom_op("row_gather", a.values[index], (a,), backward)


def index_add(a, index, size: int) -> Tensor:
    """Scatter-add a 1-d tensor into ``size`` bins: out[j] = sum of a[k] with index[k] == j."""
    a = _as_tensor(a)
    if a.values.ndim != 1:
        raise ShapeMismatchError(f"index_add: expected 1-d input, got {a.values.shape}")
    index = np.asarray(index, dtype=np.int64)
    out_values = np.zeros(size, dtype=np.float64)
    np.add.at(out_values, index, a.values)
    return custom_op("index_add", out_values, (a,), lambda g: (g[index],))


def put(a, positions, size: int) -> Tensor:
    """Place a 1-d tensor into a zero vector at distinct positions."""
    a = _as_tensor(a)
    if a.values.ndim != 1:
        raise ShapeMismatchError(f"put: expected 1-d input, got {a.values.shape}")
    positions = np.asarray(positions, dtype=np.int64)
    out_values = np.zeros(size, dtype=np.float64)
    out_values[positions] = a.values
    return custom_op("put", out_values, (a,), lambda g: (g[positions],))


def take_diag(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeMismatchError(f"take_diag: expected square matrix, got {v.shape}")
    n = v.shape[0]
    idx = np.arange(n)

    def backward(g):
        out = np.zeros_like(v)
        out[idx, idx] = g
        return (out,)

    return custom_op("take_diag", v[idx, idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    va, vb = a.values, b.values
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {va.shape} and {vb.shape}")

    def backward(g):
        ga = g @ vb.T if a.requires_grad else None
        gb = va.T @ g if b.requires_grad else None
        return ga, gb

    return custom_op("matmul", va @ vb, (a, b), backward)


def row_l2_normalize(a) -> Tensor:
    a = _as_tensor(a)
    v = a.values
    if v.ndim != 2:
        raise ShapeMismatchError(f"row_l2_normalize: expected 2-d input, got {v.shape}")
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms <= 0.0):
        if _strict((a,)):
            bad = int(np.argmin(norms))
            raise NumericalDomainError(f"degenerate embedding: zero-norm row {bad}")
        norms = np.maximum(norms, EPS_NUM)
    out_values = v / norms[:, None]

    def backward(g):
        dot = (out_values * g).sum(axis=1)
        return ((g - out_values * dot[:, None]) / norms[:, None],)

    return custom_op("row_l2_normalize", out_values, (a,), backward)


class SparseCSR:
    """CSR matrix whose values may be a constant array or a tape Tensor.

    The sparsity pattern is always constant; only the values participate in
    differentiation. ``symmetric=True`` marks matrices whose value array is
    exactly symmetric (true for every normalized adjacency built here), which
    lets spmm reuse the matrix itself as its transpose.
    """

    __slots__ = ("shape", "indptr", "indices", "values", "symmetric", "_rows", "_tperm")

    def __init__(self, shape, indptr, indices, values, symmetric: bool = False):
        self.shape = tuple(shape)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = values  # ndarray or Tensor
        self.symmetric = symmetric
        self._rows = None
        self._tperm = None

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def value_array(self) -> np.ndarray:
        return self.values.values if isinstance(self.values, Tensor) else self.values

    def rows(self) -> np.ndarray:
        if self._rows is None:
            counts = np.diff(self.indptr)
            self._rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), counts)
        return self._rows

    def to_scipy(self, data: np.ndarray | None = None) -> scipy.sparse.csr_matrix:
        if data is None:
            data = self.value_array()
        return scipy.sparse.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def _transpose_parts(self):
        # Permutation mapping values to the transpose's CSR value order.
        if self._tperm is None:
            marker = scipy.sparse.csr_matrix(
                (np.arange(self.nnz, dtype=np.float64), self.indices, self.indptr),
                shape=self.shape)
            t = marker.T.tocsr()
            self._tperm = (t.indptr.copy(), t.indices.copy(), t.data.astype(np.int64))
        return self._tperm

    def matvec_t(self, data: np.ndarray, dense: np.ndarray) -> np.ndarray:
        """Transpose product A.T @ dense for the given value array."""
        if self.symmetric:
            return self.to_scipy(data) @ dense
        tindptr, tindices, perm = self._transpose_parts()
        t = scipy.sparse.csr_matrix((data[perm], tindices, tindptr),
                                    shape=(self.shape[1], self.shape[0]))
        return t @ dense

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()


def spmm(a: SparseCSR, b) -> Tensor:
    """Sparse (CSR) times dense. Values-side gradients are produced only when
    the value array is a tensor requiring them; the pattern never has one."""
    b = _as_tensor(b)
    if b.values.ndim != 2 or b.values.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"spmm: incompatible shapes {a.shape} and {b.values.shape}")
    vals_t = a.values if isinstance(a.values, Tensor) else None
    data = vals_t.values if vals_t is not None else a.values
    out_values = a.to_scipy(data) @ b.values
    vb = b.values

    def backward(g):
        gb = a.matvec_t(data, g) if b.requires_grad else None
        if vals_t is None:
            return (gb,)
        gv = None
        if vals_t.requires_grad:
            gv = (g[a.rows()] * vb[a.indices]).sum(axis=1)
        return gv, gb

    inputs = (b,) if vals_t is None else (vals_t, b)
    return custom_op("spmm", out_values, inputs, backward)


def straight_through(hard_values: np.ndarray, soft: Tensor) -> Tensor:
    """Hard values on the forward pass, identity gradient to the relaxed input."""
    soft = _as_tensor(soft)
    hard_values = np.asarray(hard_values, dtype=np.float64)
    if hard_values.shape != soft.values.shape:
        raise ShapeMismatchError(
            f"straight_through: hard {hard_values.shape} vs soft {soft.values.shape}")
    return custom_op("straight_through", hard_values, (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# gradient checking

def fd_safety_margin(tape: Tape) -> tuple[float, float]:
    """How far a recorded computation sits from finite-difference hazards.

    Returns ``(kink_margin, min_norm)``: the smallest |input| over every
    relu/prelu record (a central difference that straddles such a kink mixes
    two slopes) and the smallest row norm entering a normalization (whose
    curvature explodes as the norm shrinks). A trustworthy h=1e-5 check wants
    the first well above h and the second far from zero.
    """
    kink = np.inf
    norm = np.inf
    for name, _, inputs, _ in tape._records:
        x = inputs[0].values
        if name in ("relu", "prelu") and x.size:
            kink = min(kink, float(np.abs(x).min()))
        elif name == "row_l2_normalize":
            norm = min(norm, float(np.sqrt((x * x).sum(axis=1)).min()))
    return kink, norm


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: int
    tape_grad: float
    fd_grad: float


@dataclass
class GradCheckReport:
    """Per-parameter comparison of tape gradients against central differences."""

    ok: bool
    max_rel_err: float
    per_param: list[ParamCheck] = field(default_factory=list)
    aborted: str | None = None

    def summary(self) -> str:
        if self.aborted:
            return f"gradcheck ABORTED: {self.aborted}"
        lines = [f"gradcheck {'ok' if self.ok else 'FAILED'} "
                 f"(max rel err {self.max_rel_err:.3e})"]
        for pc in self.per_param:
            lines.append(f"  {pc.name}: max rel err {pc.max_rel_err:.3e} "
                         f"at flat index {pc.worst_index} "
                         f"(tape {pc.tape_grad:.6e}, fd {pc.fd_grad:.6e})")
        return "\n".join(lines)


def _rel_err(a: float, b: float, atol: float) -> float:
    diff = abs(a - b)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(b), 1e-6)


def gradcheck(build, params: list[Tensor], h: float = 1e-5, tol: float = 1e-4,
              atol: float = 1e-7) -> GradCheckReport:
    """Compare tape gradients of a scalar computation against central differences.

    ``build(tape)`` must construct the computation on the given tape using the
    supplied parameter tensors and return the scalar loss. It must be
    deterministic: any noise draws have to be frozen inputs so that the only
    thing varying between evaluations is the perturbed parameter entry.

    Central differences at step ``h`` carry an absolute rounding-noise floor
    of roughly machine_eps * |loss| / h (about 1e-9 here), so differences
    below ``atol`` are indistinguishable from that noise and count as
    matching; everything larger is scored relative to the larger gradient.
    """

    def evaluate() -> tuple[Tape, Tensor]:
        tape = Tape(strict=True)
        for p in params:
            tape.watch(p)
        return tape, build(tape)

    tape, loss = evaluate()
    if not np.isfinite(loss.values):
        return GradCheckReport(ok=False, max_rel_err=np.inf,
                               aborted=f"non-finite loss {float(loss.values)}")
    tape.backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else np.array(p.grad)
                for p in params]

    report = GradCheckReport(ok=True, max_rel_err=0.0)
    for p, tape_grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        tg = tape_grad.reshape(-1)
        worst = ParamCheck(p.name or "param", 0.0, 0, 0.0, 0.0)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(evaluate()[1].values)
            flat[i] = orig - h
            f_minus = float(evaluate()[1].values)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(ok=False, max_rel_err=np.inf,
                                       aborted=f"non-finite loss while perturbing {p.name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            err = _rel_err(tg[i], fd, atol)
            if err > worst.max_rel_err:
                worst = ParamCheck(p.name or "param", err, i, float(tg[i]), float(fd))
        report.per_param.append(worst)
        report.max_rel_err = max(report.max_rel_err, worst.max_rel_err)
    report.ok = report.max_rel_err < tol
    return report
