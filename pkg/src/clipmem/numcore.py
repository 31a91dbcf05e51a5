"""Dense float64 tensors with a tape-style reverse-mode autodiff.

Only the handful of operations the collaborative-memory pipeline needs are
provided. Every op records its parents and a closure mapping the output
gradient to one gradient per parent; :func:`backward` walks the recorded
graph in reverse topological order and accumulates with ``+=``.

Broadcasting is deliberately narrow (see :func:`_check_broadcast`).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class AxisError(ValueError):
    pass


class LabelError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A float64 array plus an optional gradient and backward record."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """Fresh leaf sharing no graph with ``self``."""
        return Tensor(self.data.copy(), requires_grad=requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_disabled = 0


@contextlib.contextmanager
def no_grad():
    """Record no backward graph inside the block (inference only)."""
    global _grad_disabled
    _grad_disabled += 1
    try:
        yield
    finally:
        _grad_disabled -= 1


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = not _grad_disabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# multiply-add instrumentation

@dataclass
class FlopCounter:
    multiply_adds: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int) -> None:
        self.multiply_adds += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_counters: list[FlopCounter] = []


@contextlib.contextmanager
def count_flops():
    """Count multiply-adds of ``matmul`` and elementwise ``mul`` in the block."""
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted layouts: ``(m,n)@(n,p)``, ``(...,m,n)@(n,p)`` (shared right
    operand) and ``(...,m,n)@(...,n,p)`` with identical batch dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B
    _tally("matmul", out.size * A.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if shared:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise RankError(f"transpose expects a rank-2 tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def batch_transpose(a: Tensor) -> Tensor:
    """Swap the two trailing axes of a rank >= 2 tensor."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise RankError(f"batch_transpose expects rank >= 2, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def pool_rows(a: Tensor, P: np.ndarray) -> Tensor:
    """Left-multiply the second-to-last axis of ``a`` by the constant ``P``.

    ``a`` is ``(..., L, d)`` and ``P`` is ``(k, L)``; result ``(..., k, d)``.
    """
    a = as_tensor(a)
    P = np.asarray(P, dtype=np.float64)
    if a.ndim < 2 or P.ndim != 2 or P.shape[1] != a.shape[-2]:
        raise ShapeError(f"pool_rows: cannot apply {P.shape} to {a.shape}")
    out = np.matmul(P, a.data)
    return _make(out, (a,), lambda g: (np.matmul(P.T, g),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of an empty sequence")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# elementwise

def _check_broadcast(sa: tuple, sb: tuple) -> tuple:
    """Shapes must be equal, differ only in size-1 axes at equal rank, or
    one operand is a trailing vector matching the other's last axis."""
    if sa == sb:
        return sa
    if len(sa) == len(sb) and all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb)):
        return tuple(max(x, y) for x, y in zip(sa, sb))
    if len(sb) == 1 and len(sa) >= 1 and sb[0] == sa[-1]:
        return sa
    if len(sa) == 1 and len(sb) >= 1 and sa[0] == sb[-1]:
        return sb
    raise ShapeError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.reshape(-1, *shape).sum(axis=0) if len(shape) else g.sum()
        return np.asarray(g).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    A, B = a.data, b.data
    out = A * B
    _tally("mul", out.size)
    return _make(out, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data + float(c), (a,), lambda g: (g,))


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``scale``, ``add_scalar``."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "add_scalar": add_scalar}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# reductions and losses

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axes {tuple(axes)}")
    return tuple(sorted(out))


def mean_over_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
    out = a.data.mean(axis=ax, keepdims=keepdims) if ax else a.data.copy()
    shape = a.shape
    kept = tuple(1 if i in ax else s for i, s in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape) / count,)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(x, dtype=np.float64)))


def cross_entropy_rows(logits: Tensor, labels) -> Tensor:
    """Per-row ``-log softmax(logits)[label]`` for ``(..., C)`` logits."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim < 1:
        raise RankError("cross entropy needs logits of rank >= 1")
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"label out of range for {C} classes: {labels.tolist()}")
    logp = log_softmax(logits.data)
    onehot = np.zeros_like(logp)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    out = -(logp * onehot).sum(axis=-1)
    # max-subtracted logsumexp can leave -0.0 or tiny negatives
    out = np.maximum(out, 0.0)

    def backward(g):
        return ((np.exp(logp) - onehot) * g[..., None],)

    return _make(out, (logits,), backward)


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise RankError(f"softmax_cross_entropy expects a C-vector, got shape {logits.shape}")
    if not 0 <= int(label) < logits.shape[0]:
        raise LabelError(f"label {label} out of range for {logits.shape[0]} classes")
    return cross_entropy_rows(logits, np.asarray(label))


# ---------------------------------------------------------------------------
# backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``grad`` seeds a non-scalar root (vector-Jacobian product); without it
    the root must be a scalar.
    """
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(grad, dtype=np.float64)
        if seed.shape != loss.shape:
            raise ShapeError(f"seed gradient {seed.shape} does not match {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradReport:
    max_abs_diff: float
    max_rel_diff: float
    per_param: list = field(default_factory=list)

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_diff <= rel_tol


# Below this magnitude differences are judged absolutely (central-difference
# roundoff is ~eps*|f|/h ~ 1e-10 for the objectives used here).
REL_FLOOR = 1e-3


def rel_diff(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], param: Tensor, h: float | None = None) -> np.ndarray:
    """Central differences of ``f`` over every coordinate of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        step = h if h is not None else 1e-6 * max(1.0, abs(orig))
        hi, lo = orig + step, orig - step
        flat[i] = hi
        fp = f()
        flat[i] = lo
        fm = f()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective while probing {param.name or 'param'}[{i}]")
        # divide by the step actually taken, not the nominal one
        out[i] = (fp - fm) / (hi - lo)
    return out.reshape(param.shape)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float | None = None,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradReport:
    """Compare backprop gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated with parameters perturbed in place. ``analytic``
    overrides the backprop gradients (used for negative controls).
    """
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    if analytic is None:
        for p in params.values():
            p.zero_grad()
        loss = f()
        if not math.isfinite(loss.item()):
            raise NumericError("objective is not finite at the base point")
        backward(loss)
        analytic = {
            name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
            for name, p in params.items()
        }

    def scalar() -> float:
        return f().item()

    report = GradReport(0.0, 0.0)
    for name, p in params.items():
        num = numeric_grad(scalar, p, h)
        ana = np.asarray(analytic[name])
        report.per_param.append((name, ana, num))
        if num.size:
            report.max_abs_diff = max(report.max_abs_diff, float(np.abs(ana - num).max()))
            report.max_rel_diff = max(report.max_rel_diff, float(rel_diff(ana, num).max()))
    return report
