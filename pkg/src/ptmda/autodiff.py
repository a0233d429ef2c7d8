"""Tape-style reverse-mode differentiation over dense numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the upstream gradient to per-input gradients.  Node ids come
from a global monotonic counter, so sorting the reachable nodes by id gives a
valid topological order (inputs are always created before their consumers).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of non-conforming shape."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a parameter gradient contains inf/nan."""


class Tensor:
    """n-dimensional array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_inputs", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_counter)
        self.op = "leaf"
        self._inputs: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._inputs

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, rows):
        return take_rows(self, rows)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    # constants adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = backward
    return out


@dataclass
class Graph:
    """Nodes reachable from a root, in append (creation) order."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: Dict[int, Tensor] = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node._inputs)
        return cls(sorted(seen.values(), key=lambda t: t.node_id))

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


# ---------------------------------------------------------------------------
# broadcasting helpers: scalar ops and row-vector (bias) broadcast only
# ---------------------------------------------------------------------------


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0 or a.size == 1 or b.size == 1:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a.data, b.data)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient to ``c``)."""
    c = float(c)
    return _make("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not conform")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive input; clamp probabilities first")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tensors, bw)


def take_rows(a: Tensor, rows) -> Tensor:
    """Select rows by boolean mask, integer index array or slice."""
    rows = np.asarray(rows) if not isinstance(rows, slice) else rows
    if isinstance(rows, np.ndarray) and rows.dtype == bool and rows.shape[0] != a.shape[0]:
        raise ShapeError(f"take_rows: mask length {rows.shape[0]} != {a.shape[0]} rows")
    out = a.data[rows]

    def bw(g):
        full = np.zeros_like(a.data)
        if isinstance(rows, np.ndarray) and rows.dtype != bool:
            np.add.at(full, rows, g)  # integer indices may repeat
        else:
            full[rows] += g
        return (full,)

    return _make("take_rows", out, (a,), bw)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def pairwise_sqdist(x: Tensor) -> Tensor:
    """Matrix of squared euclidean distances between rows of ``x`` [B x d]."""
    if x.data.ndim != 2:
        raise ShapeError(f"pairwise_sqdist: expected 2-D input, got {x.shape}")
    diff = x.data[:, None, :] - x.data[None, :, :]
    out = (diff * diff).sum(axis=-1)

    def bw(g):
        s = g + g.T
        return (2.0 * (s.sum(axis=1, keepdims=True) * x.data - s @ x.data),)

    return _make("pairwise_sqdist", out, (x,), bw)


def masked_logsumexp(a: Tensor, mask: np.ndarray) -> Tensor:
    """log(sum(exp(a[mask]))) computed stably; scalar output."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_logsumexp: mask {mask.shape} vs input {a.shape}")
    if not mask.any():
        raise ValueError("masked_logsumexp: empty mask")
    vals = a.data[mask]
    m = vals.max()
    w = np.zeros_like(a.data)
    w[mask] = np.exp(vals - m)
    total = w.sum()
    out = np.asarray(m + np.log(total), dtype=a.dtype)
    weights = w / total

    return _make("masked_logsumexp", out, (a,), lambda g: (g * weights,))


def batch_outer(f: Tensor, p: Tensor) -> Tensor:
    """Row-wise outer product flattened row-major: out[b, i*dp + j] = f[b,i] * p[b,j]."""
    if f.data.ndim != 2 or p.data.ndim != 2 or f.shape[0] != p.shape[0]:
        raise ShapeError(f"batch_outer: shapes {f.shape} and {p.shape} do not conform")
    bsz, df = f.shape
    dp = p.shape[1]
    out = (f.data[:, :, None] * p.data[:, None, :]).reshape(bsz, df * dp)

    def bw(g):
        g3 = g.reshape(bsz, df, dp)
        return (g3 * p.data[:, None, :]).sum(axis=2), (g3 * f.data[:, :, None]).sum(axis=1)

    return _make("batch_outer", out, (f, p), bw)


def standardize(h: Tensor, eps: float) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-column (channel) standardization with the biased batch variance.

    Returns the normalized tensor plus the batch mean and variance used.
    """
    if h.data.ndim != 2:
        raise ShapeError(f"standardize: expected [batch x channels], got {h.shape}")
    n = h.shape[0]
    mu = h.data.mean(axis=0)
    var = h.data.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (h.data - mu) * inv_std

    def bw(g):
        gsum = g.sum(axis=0)
        gx = (g * xhat).sum(axis=0)
        return (inv_std / n * (n * g - gsum - xhat * gx),)

    return _make("standardize", xhat, (h,), bw), mu, var


def grl(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times -coeff backward."""
    if coeff < 0:
        raise ValueError("grl: coeff must be non-negative")
    c = float(coeff)
    return _make("grl", x.data.copy(), (x,), lambda g: (-c * g,))


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "clamp": clamp,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "sum": sum,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "take_rows": take_rows,
    "reshape": reshape,
    "pairwise_sqdist": pairwise_sqdist,
    "masked_logsumexp": masked_logsumexp,
    "batch_outer": batch_outer,
    "grl": grl,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor, inputs: Optional[Sequence[Tensor]] = None):
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` accumulated.  With
    ``inputs`` given, returns their gradients as a list (zeros for leaves the
    loss does not depend on); otherwise returns ``{tensor: grad}`` for every
    reachable leaf.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not part of a differentiation graph")

    graph = Graph.from_root(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for inp, gi in zip(node._inputs, node._backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result = {}
    for leaf in graph.leaves():
        g = grads.get(id(leaf))
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    if inputs is None:
        return result
    return [result.get(t, np.zeros_like(t.data)) for t in inputs]


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    expected_scale: Optional[Sequence[float]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of an entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``expected_scale`` gives, per input, the factor the analytic gradient
    should carry relative to the finite difference: ``-c`` for an input
    whose every path to the output crosses ``grl(., c)``, 1 otherwise.
    """
    inputs = list(inputs)
    scales = [1.0] * len(inputs) if expected_scale is None else [float(c) for c in expected_scale]
    if len(scales) != len(inputs):
        raise ValueError("expected_scale needs one factor per input")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: f returned a non-finite value")
    analytic = backward(out, inputs)

    worst = 0.0
    for t, ga, scale in zip(inputs, analytic, scales):
        flat = t.data.reshape(-1)
        ga = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(*inputs).data
            flat[k] = orig - eps
            fm = f(*inputs).data
            flat[k] = orig
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise FloatingPointError("grad_check: f returned a non-finite value")
            num = scale * float((fp - fm).reshape(-1)[0]) / (2 * eps)
            worst = max(worst, abs(float(ga[k]) - num) / max(1.0, abs(num)))
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: Dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Sequence[Tensor], grads, state: OptimizerState) -> None:
    """Momentum SGD with coupled weight decay, updating ``params`` in place.

    ``v <- momentum * v + (grad + weight_decay * p)``; ``p <- p - lr * v``.
    ``grads`` maps tensors to arrays; parameters missing from it are skipped
    (their buffers stay bit-identical).
    """
    pending = []
    for i, p in enumerate(params):
        g = grads.get(p) if isinstance(grads, dict) else grads[i]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            label = p.name or f"param[{i}] shape={p.shape}"
            raise NonFiniteGradientError(f"non-finite gradient for {label}")
        pending.append((i, p, g))

    for i, p, g in pending:
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(i)
        if v is None or state.momentum == 0:
            v = np.array(d, dtype=p.dtype)
        else:
            v = (state.momentum * v + d).astype(p.dtype, copy=False)
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} does not match parameter {p.shape}")
        state.velocity[i] = v
        if state.lr:
            p.data -= p.data.dtype.type(state.lr) * v


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state)
