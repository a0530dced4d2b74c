"""Dense tensor numerics with reverse-mode automatic differentiation.

Every learnable computation in this package is composed from the primitives
in this module. Ops evaluate eagerly on numpy arrays and, when gradients are
enabled, record their inputs together with a backward closure; calling
``Tensor.backward()`` on a scalar replays the closures in reverse
topological order. The traversal order is fixed by construction order, so
two backward passes over the same graph accumulate gradients bit-identically.

Design constraints kept deliberately tight:

* shapes are explicit -- no broadcasting except row-wise affine terms
  (``add_row``) and the affine part of ``layer_norm``;
* matrix ops are 2-D only; higher-rank data is reshaped before entering
  the graph;
* float32 is the working precision, float64 is used by the gradient-check
  and oracle tests.

The module also owns the on-disk tensor container format used by feature
files and checkpoints: magic bytes ``FSAR1``, a little-endian u32 rank,
``rank`` little-endian u32 extents, then the row-major float32 payload.
"""

from __future__ import annotations

import logging
import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fsar.errors import (
    ContainerError,
    ContractError,
    GraphError,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger("fsar.tensor")

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8
TENSOR_MAGIC = b"FSAR1"

_grad_enabled = True
_checked = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure value computation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def checked(enabled: bool = True):
    """Raise NonFiniteError whenever a primitive produces NaN/Inf."""
    global _checked
    prev = _checked
    _checked = enabled
    try:
        yield
    finally:
        _checked = prev


def _as_array(data, dtype) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype == np.float32 or arr.dtype == np.float64:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A dense array plus an optional position in the autodiff graph.

    ``data`` is treated as immutable by every op in this module. Training
    code may update leaf ``data`` in place between steps; that mutation is
    outside any recorded graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and push gradients to every grad leaf.

        Each call computes fresh gradients for the nodes reachable from this
        target; it does not accumulate across calls.
        """
        if self.data.size != 1:
            raise GraphError(f"backward target must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward target does not require grad")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar over the functional API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over grad-requiring ancestors of ``root``."""
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn(out)
    return out


def gradients(loss: Tensor, params: Sequence[Tensor]) -> dict[int, np.ndarray]:
    """Backward pass returning a map from ``id(param)`` to its gradient."""
    for p in params:
        p.grad = None
    loss.backward()
    return {id(p): (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)

        return run

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad)
            _accumulate(b, -out.grad)

        return run

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = _t(a)

    def bw(out):
        def run():
            _accumulate(a, -out.grad)

        return run

    return _make(-a.data, (a,), bw, "neg")


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad * b.data)
            _accumulate(b, out.grad * a.data)

        return run

    return _make(a.data * b.data, (a, b), bw, "mul")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"maximum: {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def bw(out):
        def run():
            _accumulate(a, out.grad * take_a)
            _accumulate(b, out.grad * ~take_a)

        return run

    return _make(np.maximum(a.data, b.data), (a, b), bw, "maximum")


def scale(a, factor: float) -> Tensor:
    a = _t(a)
    factor = float(factor)

    def bw(out):
        def run():
            _accumulate(a, out.grad * factor)

        return run

    return _make(a.data * factor, (a,), bw, "scale")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0

    def bw(out):
        def run():
            _accumulate(a, out.grad * mask)

        return run

    return _make(np.where(mask, a.data, 0), (a,), bw, "relu")


def transpose(a) -> Tensor:
    a = _t(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got {a.shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad.T)

        return run

    return _make(a.data.T.copy(), (a,), bw, "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _t(a)
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size:
        raise ShapeMismatchError(f"reshape: {a.shape} -> {shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad.reshape(a.shape))

        return run

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner extents differ, {a.shape} x {b.shape}")

    def bw(out):
        def run():
            _accumulate(a, out.grad @ b.data.T)
            _accumulate(b, a.data.T @ out.grad)

        return run

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def add_row(x, v) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    x, v = _t(x), _t(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeMismatchError(f"add_row: {x.shape} + {v.shape}")

    def bw(out):
        def run():
            _accumulate(x, out.grad)
            _accumulate(v, out.grad.sum(axis=0))

        return run

    return _make(x.data + v.data[None, :], (x, v), bw, "add_row")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_t(p) for p in parts]
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    cols = parts[0].shape[1]
    if any(p.data.ndim != 2 or p.shape[1] != cols for p in parts):
        raise ShapeMismatchError("concat_rows: column counts differ")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accumulate(p, out.grad[lo:hi])

        return run

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_t(p) for p in parts]
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeMismatchError("concat_cols: row counts differ")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _accumulate(p, out.grad[:, lo:hi])

        return run

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat_cols")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _t(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[0]):
        raise ShapeMismatchError(f"slice_rows: [{start}:{stop}] of {a.shape}")

    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            g[start:stop] = out.grad
            _accumulate(a, g)

        return run

    return _make(a.data[start:stop].copy(), (a,), bw, "slice_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _t(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
        raise ShapeMismatchError(f"slice_cols: [{start}:{stop}] of {a.shape}")

    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            g[:, start:stop] = out.grad
            _accumulate(a, g)

        return run

    return _make(a.data[:, start:stop].copy(), (a,), bw, "slice_cols")


def gather(a, rows, cols) -> Tensor:
    """Pick entries a[rows[k], cols[k]] into a k-by-1 column."""
    a = _t(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.data.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeMismatchError("gather: need matching 1-D index arrays on a matrix")

    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, cols), out.grad[:, 0])
            _accumulate(a, g)

        return run

    return _make(a.data[rows, cols][:, None], (a,), bw, "gather")


def take_diagonal(a) -> Tensor:
    a = _t(a)
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"take_diagonal expects a square matrix, got {a.shape}")
    m = a.shape[0]

    def bw(out):
        def run():
            g = np.zeros_like(a.data)
            g[np.arange(m), np.arange(m)] = out.grad[:, 0]
            _accumulate(a, g)

        return run

    return _make(np.diagonal(a.data).copy()[:, None], (a,), bw, "take_diagonal")


def sum_all(a) -> Tensor:
    a = _t(a)

    def bw(out):
        def run():
            _accumulate(a, np.full_like(a.data, out.grad[0, 0]))

        return run

    return _make(np.array([[a.data.sum()]], dtype=a.dtype), (a,), bw, "sum_all")


def mean_all(a) -> Tensor:
    a = _t(a)
    n = a.data.size
    if n == 0:
        raise ContractError("mean_all of an empty tensor")

    def bw(out):
        def run():
            _accumulate(a, np.full_like(a.data, out.grad[0, 0] / n))

        return run

    return _make(np.array([[a.data.mean()]], dtype=a.dtype), (a,), bw, "mean_all")


# ---------------------------------------------------------------------------
# normalization / attention primitives
# ---------------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Row-wise softmax, stabilized by per-row max subtraction."""
    x = _t(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(out):
        def run():
            g = out.grad
            _accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

        return run

    return _make(y, (x,), bw, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = _t(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"log_softmax_rows expects a matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def bw(out):
        def run():
            g = out.grad
            _accumulate(x, g - probs * g.sum(axis=1, keepdims=True))

        return run

    return _make(y, (x,), bw, "log_softmax_rows")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalization to zero mean / unit variance, then affine."""
    x, gain, bias = _t(x), _t(gain), _t(bias)
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeMismatchError(f"layer_norm needs rows of width >= 2, got {x.shape}")
    n = x.shape[1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeMismatchError(f"layer_norm affine params must be length {n}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(out):
        def run():
            dxhat = out.grad * gain.data[None, :]
            term = dxhat - dxhat.mean(axis=1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, term * inv)
            _accumulate(gain, (out.grad * xhat).sum(axis=0))
            _accumulate(bias, out.grad.sum(axis=0))

        return run

    return _make(xhat * gain.data[None, :] + bias.data[None, :], (x, gain, bias), bw, "layer_norm")


def pairwise_cosine(a, b, eps: float = COSINE_EPS) -> Tensor:
    """All-pairs cosine similarity between the rows of two matrices.

    Entry (i, j) is a_i.b_j / (|a_i||b_j| + eps), the epsilon guard making
    zero rows compare as 0 instead of dividing by zero.
    """
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(f"pairwise_cosine: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a.data, axis=1)
    nb = np.linalg.norm(b.data, axis=1)
    dots = a.data @ b.data.T
    denom = na[:, None] * nb[None, :] + eps
    cos = dots / denom

    def bw(out):
        def run():
            g = out.grad
            gd = g / denom
            # unit rows with zero-norm guard: the norm term vanishes there
            ua = a.data / np.where(na > 0, na, 1.0)[:, None]
            ub = b.data / np.where(nb > 0, nb, 1.0)[:, None]
            w = g * dots / denom**2
            _accumulate(a, gd @ b.data - ((w * nb[None, :]).sum(axis=1, keepdims=True)) * ua)
            _accumulate(b, gd.T @ a.data - ((w * na[:, None]).sum(axis=0)[:, None]) * ub)

        return run

    return _make(cos, (a, b), bw, "pairwise_cosine")


def cosine_similarity(u, v, eps: float = COSINE_EPS) -> Tensor:
    """Cosine similarity of two vectors as a 1x1 tensor."""
    u, v = _t(u), _t(v)
    if u.data.size != v.data.size:
        raise ShapeMismatchError(f"cosine_similarity: {u.shape} vs {v.shape}")
    if _checked and np.linalg.norm(u.data) == 0 and np.linalg.norm(v.data) == 0:
        logger.warning("cosine_similarity of two zero vectors, returning 0 by epsilon guard")
    ru = u if u.data.ndim == 2 and u.shape[0] == 1 else reshape(u, (1, u.data.size))
    rv = v if v.data.ndim == 2 and v.shape[0] == 1 else reshape(v, (1, v.data.size))
    return pairwise_cosine(ru, rv, eps=eps)


# ---------------------------------------------------------------------------
# tensor container format
# ---------------------------------------------------------------------------


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ContainerError(f"bad container magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise ContainerError("truncated container header")
    (rank,) = struct.unpack("<I", raw)
    if rank > 8:
        raise ContainerError(f"implausible container rank {rank}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ContainerError("truncated container extents")
    shape = struct.unpack(f"<{rank}I", raw)
    count = math.prod(shape) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ContainerError(f"container payload has {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"tensor container not found: {path}")
    with open(path, "rb") as fh:
        return read_tensor(fh)
