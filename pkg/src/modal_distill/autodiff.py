"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op checks shapes strictly. The only broadcasting is the explicit
``add_bias`` (vector over leading axes) and the explicit ``broadcast_to`` op;
elementwise ops on mismatched shapes raise :class:`DimensionError`.
"""

from __future__ import annotations

import builtins
import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an op's precondition (other than shape) is violated."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results never require grad."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d float64 array that can take part in a computation graph.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` buffer that :meth:`backward` accumulates into. Interior nodes
    get their ``grad`` overwritten on each backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar (strict shapes) ---------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None):
        return reduce(self, "sum", axis)

    def mean(self, axis=None):
        return reduce(self, "mean", axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _node(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    """Wrap a forward result, recording parents when any of them needs grad."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Public hook for fused ops defined outside this module.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    return _node(np.asarray(data, dtype=np.float64), parents, backward_fn, op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), bw, "matmul")


# -- elementwise ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def elementwise_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ContractError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def elementwise_unary(x: Tensor, kind: str) -> Tensor:
    """Pointwise relu / sigmoid / tanh. NaN inputs propagate as NaN."""
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kind]
    except KeyError:
        raise ContractError(f"unknown unary op {kind!r}") from None
    return fn(x)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``; the one sanctioned broadcast."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        return g, g.sum(axis=lead) if lead else g

    return _node(x.data + b.data, (x, b), bw, "add_bias")


# -- softmax and reductions -----------------------------------------------------


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax of a 2-d tensor.

    ``mask`` (bool, same shape) marks valid entries; masked entries get weight
    exactly 0 and receive no gradient. Every row needs at least one valid entry.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 1:
        raise DimensionError(f"softmax_rows: expected [m x n] with n >= 1, got {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise DimensionError(f"softmax_rows: mask {mask.shape} vs input {z.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("softmax_rows: a row has no valid entries")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (x,), bw, "softmax")


def _check_axis(x: Tensor, axis, op: str) -> None:
    if axis is not None and not (0 <= axis < x.ndim):
        raise DimensionError(f"{op}: axis {axis} invalid for shape {x.shape}")


def reduce(x: Tensor, kind: str = "sum", axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, kind)
    if kind not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {kind!r}")
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    out = x.data.sum(axis=axis)
    if kind == "mean":
        out = out / n

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, shape)
        if kind == "mean":
            g = g / n
        return (np.array(g),)

    return _node(np.asarray(out, dtype=np.float64), (x,), bw, kind)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    return reduce(x, "sum", axis)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return reduce(x, "mean", axis)


# -- shape plumbing -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicitly repeat size-1 axes of ``x`` up to ``shape`` (same rank)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _node(np.array(np.broadcast_to(x.data, shape)), (x,), bw, "broadcast")


def index(x: Tensor, key) -> Tensor:
    """Basic (slice / integer) indexing; backward scatters into a zero buffer."""
    x = as_tensor(x)
    shape = x.shape
    out = np.array(x.data[key])

    def bw(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return _node(out, (x,), bw, "index")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack: nothing to stack")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, bw, "stack")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Pick rows of a 2-d table; output shape is ``ids.shape + (dim,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids[(ids < 0) | (ids >= rows)].flat[0])
        raise IndexError(f"id {bad} out of range for table with {rows} rows")
    return _node(table.data[ids], (table,), bw, "gather")


# -- backward -------------------------------------------------------------------


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls. Each node is visited once, in
    reverse topological order.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else np.array(g)
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {np.shape(g)} vs state {m.shape}")
    state.t += 1
    b1, b2, lr, eps = state.beta1, state.beta2, state.learning_rate, state.epsilon
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class StepDecaySchedule:
    learning_rate: float = 1e-2
    gamma: float = 0.1
    step_epochs: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.gamma <= 0:
            raise ContractError("learning rate and gamma must be positive")


def schedule_step(sched: StepDecaySchedule, epoch: int) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    fired = builtins.sum(1 for e in sched.step_epochs if e <= epoch)
    return sched.learning_rate * sched.gamma**fired

