"""Dense tensors with reverse-mode automatic differentiation.

Forward ops build a DAG of ``Tensor`` nodes; ``backward`` replays the
recorded trace once in reverse topological order and accumulates into
``.grad`` buffers. Gradients add into existing buffers, so callers must
zero grads explicitly between optimizer steps.

Precision is a global run setting: float64 for gradient-check/test
builds, float32 for training runs. Set it before constructing any
parameters.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptyLossError, ShapeError

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the global precision to np.float32 or np.float64."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class Tensor:
    """One node of the computation graph: a dense array plus grad plumbing."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _default_dtype:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Fill .grad of every tracked tensor reachable from this scalar."""
        if self.data.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            # Loss built purely from untracked constants: nothing to do.
            return
        ComputationRecord.trace(self).backprop(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class ComputationRecord:
    """Ordered trace of the operations reaching one tensor.

    Nodes appear in topological order (inputs before outputs); replaying
    it in reverse visits every tracked tensor exactly once per use.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes)

    def backprop(self, root: Tensor) -> None:
        root.accumulate_grad(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive operations ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _result(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _result(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two tensors, batched when both carry equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim == 2 and b.ndim == 2):
            raise ShapeError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate_grad(a.data.swapaxes(-1, -2) @ g)

    return _result(out, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _result(out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inverse))

    return _result(out, (x,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _result(out, tuple(tensors), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x.accumulate_grad(full)

    return _result(out, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatters with np.add.at."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table.accumulate_grad(full)

    return _result(out, (table,), bw)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - out * out))

    return _result(out, (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def np_gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximation GELU, shared by the graph op and the decode path."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
            dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x.accumulate_grad(g * dx)

    return _result(out, (x,), bw)


def np_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax, shared by the graph op and the decode path."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"softmax axis {axis} out of range for rank {x.ndim}")
    out = np_softmax(x.data, axis=axis)

    def bw(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x.accumulate_grad(out * (g - inner))

    return _result(out, (x,), bw)


def np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gain + bias, xhat, inv


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    out, xhat, inv = np_layer_norm(x.data, gain.data, bias.data, eps)
    n = x.data.shape[-1]

    def bw(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxhat - m1 - xhat * m2))

    return _result(out, (x, gain, bias), bw)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _result(out, (x,), bw)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis)
    n = x.data.shape[axis]

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _result(out, (x,), bw)


def cross_entropy(logits: Tensor, targets, ignore_id: int = -1) -> Tensor:
    """Mean NLL of ``targets`` under log-softmaxed ``logits`` rows.

    Rows whose target equals ``ignore_id`` contribute nothing. At least
    one row must contribute, and every live target must be a valid class.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (T, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"targets shape {t.shape} != ({logits.shape[0]},)")
    used = t != ignore_id
    n_used = int(used.sum())
    if n_used == 0:
        raise EmptyLossError("all target positions are ignored")
    live = t[used]
    if live.min() < 0 or live.max() >= logits.shape[1]:
        raise IndexError(f"target id out of range for vocab {logits.shape[1]}")

    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(used)[0]
    out = np.asarray(-logp[rows, live].mean())

    def bw(g):
        if logits.requires_grad:
            d = np.zeros_like(x)
            d[rows] = np.exp(logp[rows])
            d[rows, live] -= 1.0
            logits.accumulate_grad(d * (g / n_used))

    return _result(out, (logits,), bw)


def assert_finite(x: Tensor, what: str = "tensor") -> None:
    if not np.isfinite(x.data).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
