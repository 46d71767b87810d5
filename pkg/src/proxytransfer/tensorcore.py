"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a :class:`Node` on its output.  Nodes
carry a serial id taken from the same counter as tensor ids, so ids of inputs
always precede the id of their consumer; sorting the reachable nodes by id in
descending order gives a valid reverse topological order for ``backward``.
The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateInputError, DimensionError

NORM_EPS = 1e-12

_serial = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation: kind, inputs, output id and a backward closure.

    The closure holds whatever intermediates the op saved during forward.
    """

    __slots__ = ("op", "inputs", "out_id", "backward_fn")

    def __init__(self, op: str, inputs: tuple, out_id: int, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn

    @property
    def input_ids(self) -> list[int]:
        return [t.id for t in self.inputs]

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={self.input_ids}, out={self.out_id})"


class Tensor:
    """N-dimensional float array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_node", "__weakref__")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_serial)
        self._node: Node | None = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out._node = Node(op, tuple(inputs), out.id, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    b = _as_tensor(b)
    return _as_tensor(a, like=b), b


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _make(a.data / b.data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), "pow", backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), "relu", lambda g: (g * mask,))


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make(out, (a,), "mean", backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter back with ``np.add.at``."""

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.data[index]), (a,), "take", backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", backward)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """``v / ||v||_2`` along ``axis``; zero-norm input is an error, not a clamp."""
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateInputError(f"l2_normalize: vector norm <= {eps}")
    y = v.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (v,), "l2_normalize", backward)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Distance between equal-shape vectors over the last axis.

    At ``a == b`` the gradient is taken to be zero (a valid subgradient).
    """
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"euclidean_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def backward(g):
        safe = np.where(d > 0, d, 1)
        unit = np.where((d > 0)[..., None], diff / safe[..., None], 0)
        ga = np.asarray(g)[..., None] * unit
        return ga, -ga

    return _make(d, (a, b), "euclidean_distance", backward)


def pairwise_distances(a: Tensor, b: Tensor, squared: bool = False) -> Tensor:
    """All-pairs distances between rows of ``a`` [n×d] and ``b`` [m×d] -> [n×m]."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distances shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    if squared:
        out = sq
    else:
        out = np.sqrt(sq)

    def backward(g):
        if squared:
            w = 2.0 * g
        else:
            w = np.where(out > 0, g / np.where(out > 0, out, 1), 0)
        wd = w[..., None] * diff
        return wd.sum(axis=1).astype(a.dtype), -wd.sum(axis=0).astype(b.dtype)

    return _make(out, (a, b), "pairwise_distances", backward)


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; ``mask`` selects included entries."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ContractError("logsumexp: empty selection along reduced axis")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _make(out.astype(a.dtype), (a,), "logsumexp", backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), "log_softmax", backward)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIkk weights, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d input {x.shape} smaller than kernel {w.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # channel-major scatter buffer keeps every slice add contiguous
            dcols = (wmat.T @ gm.T).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros((c, n, hp, wp), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), "conv2d", backward)


# -- graph --------------------------------------------------------------------

def graph(loss: Tensor) -> list[Node]:
    """Recorded operations reachable from ``loss`` in topological order."""
    seen: dict[int, Node] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.out_id in seen:
            continue
        seen[node.out_id] = node
        stack.extend(node.inputs)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    grads: dict[int, np.ndarray] = {loss.id: seed}
    for node in reversed(graph(loss)):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is not None:
                prev = grads.get(inp.id)
                grads[inp.id] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
