"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation is a registered *primitive* with a forward
rule and a backward rule.  Forward calls append a node to a thread-local
tape whenever an input requires a gradient; :func:`backward` walks that tape
once in reverse and then discards it, so a second backward without a new
forward raises :class:`TapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "UnknownPrimitiveError",
    "PRIMITIVES",
    "forward_primitive",
    "backward",
    "no_grad",
    "reset_tape",
    "finite_difference_check",
    "tensor",
    "constant",
]


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class UnknownPrimitiveError(KeyError):
    pass


class Tensor:
    """A float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return forward_primitive("add", [self, _wrap(other)])

    def __radd__(self, other):
        return forward_primitive("add", [_wrap(other), self])

    def __sub__(self, other):
        return forward_primitive("sub", [self, _wrap(other)])

    def __rsub__(self, other):
        return forward_primitive("sub", [_wrap(other), self])

    def __mul__(self, other):
        return forward_primitive("mul", [self, _wrap(other)])

    def __rmul__(self, other):
        return forward_primitive("mul", [_wrap(other), self])

    def __truediv__(self, other):
        return forward_primitive("div", [self, _wrap(other)])

    def __rtruediv__(self, other):
        return forward_primitive("div", [_wrap(other), self])

    def __neg__(self):
        return forward_primitive("neg", [self])

    def __matmul__(self, other):
        return forward_primitive("matmul", [self, _wrap(other)])

    def __rmatmul__(self, other):
        return forward_primitive("matmul", [_wrap(other), self])

    def __getitem__(self, key):
        return forward_primitive("getitem", [self], key=key)

    def sum(self, axis=None, keepdims: bool = False):
        return forward_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return forward_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_primitive("reshape", [self], shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return forward_primitive("transpose", [self], axes=axes or None)

    @property
    def T(self):
        return self.transpose()

    def relu(self):
        return forward_primitive("relu", [self])

    def sigmoid(self):
        return forward_primitive("sigmoid", [self])

    def exp(self):
        return forward_primitive("exp", [self])

    def log(self):
        return forward_primitive("log", [self])

    def sin(self):
        return forward_primitive("sin", [self])

    def softmax(self, axis: int = -1):
        return forward_primitive("softmax", [self], axis=axis)

    def log_softmax(self, axis: int = -1):
        return forward_primitive("log_softmax", [self], axis=axis)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tape


class _Value:
    """Output array holder; keeps nodes from pointing back at their tensor (no reference cycle)."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        self.data = data


@dataclass
class _Node:
    prim: "Primitive"
    inputs: tuple[Tensor, ...]
    out: _Value
    saved: Any
    attrs: dict
    generation: int


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    generation: int = 0
    enabled: bool = True

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1


_local = threading.local()


def _tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def reset_tape() -> None:
    """Discard every recorded node; the next forward starts a fresh tape."""
    _tape().clear()


@contextlib.contextmanager
def no_grad():
    tape = _tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


# ---------------------------------------------------------------------------
# Primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., Sequence[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward, backward) -> None:
    PRIMITIVES[name] = Primitive(name, forward, backward)


def forward_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and record it on the tape if needed."""
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise UnknownPrimitiveError(f"unknown primitive {op!r}")
    inputs = tuple(_wrap(t) for t in inputs)
    arrays = [t.data for t in inputs]
    with np.errstate(all="ignore"):
        out, saved = prim.forward(*arrays, **attrs)
    out = np.asarray(out, dtype=np.float64)
    if not np.isfinite(out).all():
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise FloatingPointError(f"{op} produced non-finite values (input shapes {shapes})")
    tape = _tape()
    rg = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=rg)
    if rg:
        node = _Node(prim, inputs, _Value(out), saved, attrs, tape.generation)
        result._node = node
        tape.record(node)
    return result


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``params`` that the loss does not depend on get a zero
    gradient.  Returns a map from leaf tensor to its accumulated gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape()
    result: dict[Tensor, np.ndarray] = {}

    def accumulate(leaf: Tensor, g: np.ndarray) -> None:
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = leaf.grad

    if loss._node is None:
        if loss.requires_grad:
            accumulate(loss, np.ones_like(loss.data))
    else:
        if loss._node.generation != tape.generation or not tape.nodes:
            raise TapeError("backward called twice without a new forward pass")
        # keyed by producing node; the tape keeps every node alive until cleared
        grads: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            in_grads = node.prim.backward(g, node)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    accumulate(inp, gi)
                else:
                    key = id(inp._node)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
        tape.clear()
    if params is not None:
        for p in params:
            if p.requires_grad and p not in result:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                result[p] = p.grad
    return result


# ---------------------------------------------------------------------------
# Primitive definitions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _binary(name, fwd, grad_a, grad_b):
    def forward(a, b):
        _broadcast_check(name, a, b)
        return fwd(a, b), None

    def bwd(g, node):
        a, b = (t.data for t in node.inputs)
        return (
            _unbroadcast(grad_a(g, a, b, node.out.data), a.shape),
            _unbroadcast(grad_b(g, a, b, node.out.data), b.shape),
        )

    _register(name, forward, bwd)


_binary("add", np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)
_binary("sub", np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)
_binary("mul", np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)
_binary("div", np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def _unary(name, fwd, grad):
    _register(name, lambda x: (fwd(x), None), lambda g, node: (grad(g, node.inputs[0].data, node.out.data),))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_unary("neg", np.negative, lambda g, x, o: -g)
_unary("relu", lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0))
_unary("sigmoid", _sigmoid, lambda g, x, o: g * o * (1.0 - o))
_unary("exp", np.exp, lambda g, x, o: g * o)
_unary("log", np.log, lambda g, x, o: g / x)
_unary("sin", np.sin, lambda g, x, o: g * np.cos(x))
_unary("tanh", np.tanh, lambda g, x, o: g * (1.0 - o * o))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions {a.shape} and {b.shape} do not broadcast") from None
    return a @ b, None


def _matmul_bwd(g, node):
    a, b = (t.data for t in node.inputs)
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2 and a.ndim > 2:
        # fold the batch dimensions instead of summing a stack of products
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_register("matmul", _matmul_fwd, _matmul_bwd)


def _spmm_fwd(x, matrix):
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: sparse {matrix.shape} cannot multiply dense {x.shape}")
    return np.asarray(matrix @ x), None


_register("spmm", _spmm_fwd, lambda g, node: (np.asarray(node.attrs["matrix"].T @ g),))


def _concat_fwd(*xs, axis=-1):
    ref = xs[0]
    for x in xs[1:]:
        if x.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch {[x.shape for x in xs]}")
        ax = axis % ref.ndim
        if x.shape[:ax] + x.shape[ax + 1 :] != ref.shape[:ax] + ref.shape[ax + 1 :]:
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(g, node):
    axis = node.attrs.get("axis", -1)
    sizes = [t.data.shape[axis] for t in node.inputs]
    return np.split(g, np.cumsum(sizes)[:-1], axis=axis)


_register("concat", _concat_fwd, _concat_bwd)


def _softmax_array(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_array(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


_register(
    "softmax",
    lambda x, axis=-1: (_softmax_array(x, axis), None),
    lambda g, node: (
        node.out.data * (g - (g * node.out.data).sum(axis=node.attrs.get("axis", -1), keepdims=True)),
    ),
)
_register(
    "log_softmax",
    lambda x, axis=-1: (_log_softmax_array(x, axis), None),
    lambda g, node: (
        g - np.exp(node.out.data) * g.sum(axis=node.attrs.get("axis", -1), keepdims=True),
    ),
)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([shape[a] for a in axes]))


_register(
    "sum",
    lambda x, axis=None, keepdims=False: (np.sum(x, axis=axis, keepdims=keepdims), None),
    lambda g, node: (
        _expand_reduced(g, node.inputs[0].shape, node.attrs.get("axis"), node.attrs.get("keepdims", False)).copy(),
    ),
)
_register(
    "mean",
    lambda x, axis=None, keepdims=False: (np.mean(x, axis=axis, keepdims=keepdims), None),
    lambda g, node: (
        _expand_reduced(g, node.inputs[0].shape, node.attrs.get("axis"), node.attrs.get("keepdims", False))
        / _reduced_count(node.inputs[0].shape, node.attrs.get("axis")),
    ),
)


def _l2norm_fwd(x, axis=-1):
    return np.sqrt((x * x).sum(axis=axis)), None


def _l2norm_bwd(g, node):
    x = node.inputs[0].data
    axis = node.attrs.get("axis", -1)
    n = np.expand_dims(node.out.data, axis)
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, x / safe, 0.0) * np.expand_dims(g, axis),)


_register("l2norm", _l2norm_fwd, _l2norm_bwd)


def _take_fwd(table, index):
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"take: index out of range for table with {table.shape[0]} rows")
    return table[index], None


def _take_bwd(g, node):
    out = np.zeros_like(node.inputs[0].data)
    np.add.at(out, np.asarray(node.attrs["index"]), g)
    return (out,)


_register("take", _take_fwd, _take_bwd)


def _getitem_bwd(g, node):
    out = np.zeros_like(node.inputs[0].data)
    np.add.at(out, node.attrs["key"], g)
    return (out,)


_register("getitem", lambda x, key: (x[key], None), _getitem_bwd)


def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None


_register("reshape", _reshape_fwd, lambda g, node: (g.reshape(node.inputs[0].shape),))


def _transpose_bwd(g, node):
    axes = node.attrs.get("axes")
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


_register("transpose", lambda x, axes=None: (np.transpose(x, axes), None), _transpose_bwd)


def _masked_fill_fwd(x, mask, value):
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    return np.where(mask, value, x), None


_register(
    "masked_fill",
    _masked_fill_fwd,
    lambda g, node: (np.where(np.asarray(node.attrs["mask"], dtype=bool), 0.0, g),),
)


def _dropout_fwd(x, mask, p):
    return x * mask / (1.0 - p), None


_register(
    "dropout",
    _dropout_fwd,
    lambda g, node: (g * node.attrs["mask"] / (1.0 - node.attrs["p"]),),
)


def _layer_norm_fwd(x, gamma, beta, eps=1e-5):
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs features {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_bwd(g, node):
    xhat, inv = node.saved
    gamma = node.inputs[1].data
    lead = tuple(range(g.ndim - 1))
    dxhat = g * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


_register("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def _mask_count(mask, shape):
    m = np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    return m, max(int(m.sum()), 1)


def _mse_fwd(pred, target, mask=None):
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    m, n = _mask_count(mask, pred.shape)
    diff = np.where(m, pred - target, 0.0)
    return np.array((diff * diff).sum() / n), (diff, n)


_register("mse", _mse_fwd, lambda g, node: (2.0 * node.saved[0] / node.saved[1] * g,))


def _ce_fwd(logits, target, mask=None):
    target = np.asarray(target)
    if logits.shape[:-1] != target.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= logits.shape[-1]):
        raise ShapeError(f"cross_entropy: target class out of range for {logits.shape[-1]} classes")
    m, n = _mask_count(mask, target.shape)
    logp = _log_softmax_array(logits, -1)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    return np.array(-(np.where(m, picked, 0.0)).sum() / n), (logp, m, n)


def _ce_bwd(g, node):
    logp, m, n = node.saved
    target = np.asarray(node.attrs["target"])
    grad = np.exp(logp)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
    return (grad * (m[..., None] / n) * g,)


_register("cross_entropy", _ce_fwd, _ce_bwd)


# ---------------------------------------------------------------------------
# Functional wrappers


def add(a, b):
    return forward_primitive("add", [a, b])


def mul(a, b):
    return forward_primitive("mul", [a, b])


def matmul(a, b):
    return forward_primitive("matmul", [a, b])


def spmm(matrix, x):
    """Sparse constant ``matrix`` times dense tensor ``x``."""
    return forward_primitive("spmm", [x], matrix=matrix)


def concat(tensors: Sequence[Tensor], axis: int = -1):
    return forward_primitive("concat", list(tensors), axis=axis)


def sigmoid(x):
    return forward_primitive("sigmoid", [x])


def relu(x):
    return forward_primitive("relu", [x])


def tanh(x):
    return forward_primitive("tanh", [x])


def softmax(x, axis: int = -1):
    return forward_primitive("softmax", [x], axis=axis)


def log_softmax(x, axis: int = -1):
    return forward_primitive("log_softmax", [x], axis=axis)


def exp(x):
    return forward_primitive("exp", [x])


def log(x):
    return forward_primitive("log", [x])


def sin(x):
    return forward_primitive("sin", [x])


def l2norm(x, axis: int = -1):
    return forward_primitive("l2norm", [x], axis=axis)


def take(table, index):
    """Row lookup: ``table[index]`` for an integer array of any shape."""
    return forward_primitive("take", [table], index=np.asarray(index, dtype=np.int64))


def masked_fill(x, mask, value: float):
    return forward_primitive("masked_fill", [x], mask=mask, value=value)


def dropout(x, p: float, rng: np.random.Generator, training: bool = True):
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not training or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(np.float64)
    return forward_primitive("dropout", [x], mask=mask, p=p)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    return forward_primitive("layer_norm", [x, gamma, beta], eps=eps)


def mse(pred, target, mask=None):
    return forward_primitive("mse", [pred], target=np.asarray(target, dtype=np.float64), mask=mask)


def cross_entropy(logits, target, mask=None):
    """Mean softmax cross-entropy over positions where ``mask`` is true."""
    return forward_primitive("cross_entropy", [logits], target=np.asarray(target, dtype=np.int64), mask=mask)


# ---------------------------------------------------------------------------
# Verification


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    Returns max |analytic - numeric| / max(1, |analytic|) over the probed
    entries.  ``max_entries`` caps the probes per parameter (drawn with
    ``seed``); ``None`` probes every entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.grad = None
    reset_tape()
    loss = loss_fn()
    backward(loss, params)
    rng = np.random.default_rng(seed)

    def probe() -> float:
        with no_grad():
            val = loss_fn()
        v = float(val.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise FloatingPointError("non-finite loss while probing")
        return v

    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = probe()
            flat[i] = orig - step
            down = probe()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
