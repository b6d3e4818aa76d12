"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built dynamically as operations run (define-by-run): every
operation output remembers its parent tensors and a backward rule, and
``backward`` on a scalar loss replays those rules in reverse construction
order. All data lives in 64-bit numpy arrays so gradient checks can be held
to tight tolerances.

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one of them is a scalar, or one is a vector matching the other's trailing
axis. Nothing in this model needs more.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_NODE_IDS = itertools.count()

Arrayish = "Tensor | np.ndarray | float | int"


class Tensor:
    """A dense float64 array participating in a differentiation graph.

    Leaf tensors are created directly (optionally with ``requires_grad``);
    operation outputs carry a backward rule that accumulates gradients into
    their parents. ``grad`` is lazily allocated and always matches ``data``
    in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "_nid",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _rule: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._rule = _rule
        self._nid = next(_NODE_IDS)
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate gradients of every requires_grad ancestor of this scalar.

        Raises ContractError if the tensor is not a scalar or if backward was
        already run from this root without rebuilding the graph.
        """
        if self.data.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise ContractError(
                "backward already ran from this loss; rebuild the graph first")
        self._backward_done = True

        # Reverse construction order is a valid topological order for a
        # define-by-run graph, so a sort by node id replaces an explicit
        # topological sort.
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack: list[Tensor] = [self]
        while stack:
            t = stack.pop()
            if t._nid in seen or not t.requires_grad:
                continue
            seen.add(t._nid)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._nid, reverse=True)

        self._accumulate(np.ones_like(self.data))
        for t in nodes:
            if t._rule is not None and t.grad is not None:
                t._rule(t.grad)

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_axis(t: Tensor, axis: int) -> int:
    if not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(
            f"axis {axis} out of range for shape {t.shape}")
    return axis % t.data.ndim


def _broadcast_check(sa: tuple, sb: tuple) -> None:
    """Permit equal shapes, scalar-with-tensor, or trailing-axis vector."""
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 1 and sb[-1:] == sa:
        return
    if len(sb) == 1 and sa[-1:] == sb:
        return
    raise DimensionError(f"shapes {sa} and {sb} do not broadcast "
                         "(scalar or trailing-axis vector only)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=tuple(range(g.ndim - len(shape)))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def rule(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    out._rule = rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a.shape, b.shape)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def rule(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    out._rule = rule
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))
    out._rule = lambda g: a._accumulate(-g) if a.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._rule = rule
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    out._rule = rule
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericError("log requires strictly positive input")
    out = Tensor(np.log(a.data), _parents=(a,))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    out._rule = rule
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, _parents=(a,))

    def rule(g):
        if a.requires_grad:
            a._accumulate(2.0 * a.data * g)

    out._rule = rule
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stable softmax: exponentials are taken after max subtraction."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input must be finite")
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,))

    def rule(g):
        if a.requires_grad:
            gs = g * s
            a._accumulate(gs - s * gs.sum(axis=axis, keepdims=True))

    out._rule = rule
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("log_softmax input must be finite")
    axis = _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    val = shifted - lse
    out = Tensor(val, _parents=(a,))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(val) * g.sum(axis=axis, keepdims=True))

    out._rule = rule
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    axis = _check_axis(tensors[0], axis)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    out._rule = rule
    return out


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = Tensor(a.data.sum(), _parents=(a,))

        def rule(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, float(g)))
    else:
        axis = _check_axis(a, axis)
        out = Tensor(a.data.sum(axis=axis), _parents=(a,))

        def rule(g):
            if a.requires_grad:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis),
                                              a.shape).copy())

    out._rule = rule
    return out


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis(a, axis)]
    return mul(reduce_sum(a, axis), Tensor(1.0 / n))


def l2_normalize(a: Tensor, axis: int = -1, epsilon: float = 1e-12) -> Tensor:
    """Divide by max(L2 norm along axis, epsilon); epsilon guards zero rows."""
    axis = _check_axis(a, axis)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    clipped = np.maximum(norm, epsilon)
    val = a.data / clipped
    out = Tensor(val, _parents=(a,))
    live = norm > epsilon  # below epsilon the map is a fixed scaling by 1/epsilon

    def rule(g):
        if a.requires_grad:
            proj = (g * a.data).sum(axis=axis, keepdims=True)
            a._accumulate(g / clipped - live * a.data * proj / clipped**3)

    out._rule = rule
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-d tensor, got {a.shape}")
    out = Tensor(a.data.T, _parents=(a,))
    out._rule = lambda g: a._accumulate(g.T) if a.requires_grad else None
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds into the source."""
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"row index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx], _parents=(a,))

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            a._accumulate(buf)

    out._rule = rule
    return out


def take_per_row(a: Tensor, indices: np.ndarray) -> Tensor:
    """out[t] = a[t, indices[t]] for a 2-d tensor; returns a vector."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_per_row needs a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise DimensionError(
            f"need one index per row: {idx.shape} vs {a.shape[0]} rows")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx], _parents=(a,))

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (rows, idx), g)
            a._accumulate(buf)

    out._rule = rule
    return out


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row t of a 2-d tensor by scalar s[t]."""
    if a.data.ndim != 2 or s.data.ndim != 1 or s.shape[0] != a.shape[0]:
        raise DimensionError(
            f"scale_rows needs (T,d) and (T,): got {a.shape} and {s.shape}")
    out = Tensor(a.data * s.data[:, None], _parents=(a, s))

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * s.data[:, None])
        if s.requires_grad:
            s._accumulate((g * a.data).sum(axis=1))

    out._rule = rule
    return out


def shift_rows(a: Tensor, offset: int) -> Tensor:
    """Shift rows down by offset (up when negative), zero-filling the gap.

    out[t] = a[t - offset] where in range, else 0.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"shift_rows needs a 2-d tensor, got {a.shape}")
    val = np.zeros_like(a.data)
    t = a.shape[0]
    k = offset
    if abs(k) < t:
        if k >= 0:
            val[k:] = a.data[:t - k]
        else:
            val[:t + k] = a.data[-k:]
    out = Tensor(val, _parents=(a,))

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            if abs(k) < t:
                if k >= 0:
                    buf[:t - k] = g[k:]
                else:
                    buf[-k:] = g[:t + k]
            a._accumulate(buf)

    out._rule = rule
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"slice_cols needs a 2-d tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(
            f"column slice [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.data[:, start:stop], _parents=(a,))

    def rule(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            a._accumulate(buf)

    out._rule = rule
    return out


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""
    max_rel_error: float
    tolerance: float
    passed: bool
    checked: int


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f: Callable, x: "Tensor | Sequence[Tensor]",
               step: float = 1e-5, tolerance: float = 1e-4,
               max_checks: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare f's analytic gradient at x against central finite differences.

    ``f`` must be a pure scalar-valued function of ``x`` (a tensor or a
    sequence of tensors), re-evaluable at perturbed points. When
    ``max_checks`` is given, at most that many coordinates per tensor are
    probed (sampled with ``rng``); otherwise every coordinate is checked.
    Relative error uses the mixed scale max(1, |analytic|, |numeric|) so
    near-zero gradients are judged absolutely.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    max_err = 0.0
    checked = 0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_checks is not None and n > max_checks:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_checks, replace=False)
        else:
            coords = range(n)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = float(f(x).data)
            flat[c] = orig - step
            lo = float(f(x).data)
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * step)
            max_err = max(max_err, _rel_error(a.reshape(-1)[c], numeric))
            checked += 1
    return GradCheckReport(max_rel_error=float(max_err), tolerance=tolerance,
                           passed=bool(max_err <= tolerance), checked=checked)
