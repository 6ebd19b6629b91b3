"""
ndtensor - a minimal, deterministic reverse-mode autodiff engine on NumPy.

Provides exactly the operations the pair networks need: conv2d, relu,
global_avg_pool, concat_channels/slice_channels, linear, softmax2,
cross_entropy, add, mul, sum and mean_scalars.

Every op returns a new Tensor. When any input requires a gradient (and
recording is enabled) the op appends a Node to the computation graph; nodes
get monotonically increasing ids, so sorting by id is a topological order.
"""
import itertools
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import NumericalError, ShapeError

CE_CLAMP = 1e-12

_dtype: ContextVar[np.dtype] = ContextVar("ndtensor_dtype", default=np.dtype(np.float32))
_recording: ContextVar[bool] = ContextVar("ndtensor_recording", default=True)
_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Switch the dtype of newly created tensors ("float32" or "float64")."""
    dtype = np.dtype(name)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {name}")
    token = _dtype.set(dtype)
    try:
        yield
    finally:
        _dtype.reset(token)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording graph nodes."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def default_dtype() -> np.dtype:
    return _dtype.get()


@dataclass(frozen=True)
class Node:
    """One recorded operation."""
    node_id: int
    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


@dataclass(frozen=True)
class ComputationGraph:
    """Nodes reachable from a loss, in topological (creation) order."""
    nodes: Tuple[Node, ...]

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """N-dimensional array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        self.data = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, node: Optional[Node]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = node is not None
        out.grad = None
        out.name = None
        out._node = node
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, None)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    if _recording.get() and any(t.requires_grad for t in inputs):
        return Tensor._wrap(data, Node(next(_node_ids), op, tuple(inputs), backward_fn))
    return Tensor._wrap(data, None)


def trace(loss: Tensor) -> ComputationGraph:
    """Collect the nodes `loss` depends on, in topological order."""
    seen = {}
    stack = [loss._node] if loss._node is not None else []
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(t._node for t in node.inputs if t._node is not None)
    return ComputationGraph(tuple(seen[k] for k in sorted(seen)))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf tensor with requires_grad."""
    if loss.ndim != 0:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate(loss, seed)
        return

    pending = {loss._node.node_id: seed}
    for node in reversed(trace(loss).nodes):
        grad = pending.pop(node.node_id, None)
        if grad is None:
            continue
        for tensor, g in zip(node.inputs, node.backward_fn(grad)):
            if g is None or not tensor.requires_grad:
                continue
            if tensor._node is None:
                _accumulate(tensor, g)
            else:
                key = tensor._node.node_id
                pending[key] = pending[key] + g if key in pending else g


def _accumulate(tensor: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=tensor.data.dtype).reshape(tensor.shape)
    tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2D cross-correlation: [N,C_in,H,W] * [C_out,C_in,kH,kW] + bias."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if c_in != k_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def backward_fn(g):
        d_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        d_bias = g.sum(axis=(0, 2, 3))
        d_xp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel.data[:, :, i, j], axes=([1], [0]))
                d_xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        d_x = d_xp[:, :, padding:padding + h, padding:padding + w]
        return d_x, d_kernel, d_bias

    return _record("conv2d", np.ascontiguousarray(out), (x, kernel, bias), backward_fn)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _record(
        "relu",
        np.where(positive, x.data, 0).astype(x.data.dtype),
        (x,),
        lambda g: (g * positive,),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] plane means."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape

    def backward_fn(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _record("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1; `a` takes channels [0,C1), `b` takes [C1,C1+C2)."""
    if a.ndim != b.ndim or a.ndim < 2 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    split = a.shape[1]
    return _record(
        "concat_channels",
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim < 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels [{start},{stop}) out of range for {x.shape}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_channels", x.data[:, start:stop].copy(), (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x [N,D_in], weight [D_out,D_in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear dim mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias {bias.shape} does not match weight {weight.shape}")

    def backward_fn(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _record("linear", x.data @ weight.data.T + bias.data, (x, weight, bias), backward_fn)


def softmax2(logits: Tensor) -> Tensor:
    """Row-wise two-class softmax with max subtraction."""
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"softmax2 expects [N,2], got {logits.shape}")
    if np.isnan(logits.data).any():
        raise NumericalError("softmax2 received NaN logits")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record("softmax2", p, (logits,), backward_fn)


def cross_entropy(probs: Tensor, target: Sequence[int]) -> Tensor:
    """Mean of -ln(p[target]) with p clamped below at 1e-12."""
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ShapeError(f"cross_entropy expects [N,2] probabilities, got {probs.shape}")
    idx = np.asarray(target).reshape(-1)
    if idx.shape[0] != probs.shape[0]:
        raise ShapeError(f"cross_entropy got {idx.shape[0]} targets for {probs.shape[0]} rows")
    if not np.isin(idx, (0, 1)).all():
        raise ValueError(f"cross_entropy targets must be 0 or 1, got {idx.tolist()}")
    idx = idx.astype(np.intp)
    rows = np.arange(probs.shape[0])
    picked = probs.data[rows, idx]
    clamped = np.maximum(picked, CE_CLAMP)
    n = probs.shape[0]
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype)

    def backward_fn(g):
        d = np.zeros_like(probs.data)
        d[rows, idx] = np.where(picked > CE_CLAMP, -1.0 / (n * clamped), 0.0) * g
        return (d,)

    return _record("cross_entropy", loss, (probs,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum(x: Tensor) -> Tensor:
    return _record(
        "sum",
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.full(x.shape, g, dtype=x.data.dtype),),
    )


def mean_scalars(terms: List[Tensor]) -> Tensor:
    """Average of scalar tensors (loss terms)."""
    if not terms or any(t.ndim != 0 for t in terms):
        raise ShapeError("mean_scalars needs a non-empty list of scalar tensors")
    n = len(terms)
    value = np.asarray(np.mean([t.data for t in terms]), dtype=terms[0].data.dtype)
    return _record("mean_scalars", value, terms, lambda g: tuple(g / n for _ in range(n)))
