"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The op set is the minimum needed to express the collaborative recognition
network, its losses, and the meta update: elementwise arithmetic with a small
broadcast whitelist, (batched) matmul, conv building blocks, reductions,
softmax, and a stabilized cross-entropy.

Every gradient rule is written in terms of these same ops, so a backward pass
can itself be recorded and differentiated (``backward(..., create_graph=True)``).
The exact second-order meta update relies on this.

Graphs are rebuilt on every forward pass; a tensor is immutable after creation
except for its ``grad`` buffer.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, UsageError

_uid = itertools.count()
_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def no_grad():
    """Suppress graph recording inside the block (inference / fast backward)."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Node:
    """One recorded operation: op tag, input tensors, output tensor, vjp."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple, out: "Tensor", vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Graph:
    """Nodes reachable from a root, in creation (= topological) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def records(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(n.op, tuple(t.uid for t in n.inputs), n.out.uid) for n in self.nodes]


class Tensor:
    """A float64 array plus the bookkeeping autodiff needs.

    ``values`` is C-contiguous (row-major), so ``values.ravel()`` is the flat
    representation. ``grad`` is allocated lazily for op outputs but eagerly
    (as zeros) for leaves, so a leaf disconnected from a loss reads as zero
    gradient after ``backward``.
    """

    __slots__ = ("values", "requires_grad", "grad", "node", "uid")

    def __init__(self, values, requires_grad: bool = False):
        # asarray(order="C") keeps 0-d shapes, ascontiguousarray would not
        arr = np.asarray(values, dtype=np.float64, order="C")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None
        self.uid = next(_uid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.requires_grad = False
        out.grad = None
        out.node = None
        out.uid = next(_uid)
        return out

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


def _make(op: str, values: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(values)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _recording() and out.requires_grad:
        out.node = Node(op, inputs, out, vjp)
    return out


# ---------------------------------------------------------------------------
# broadcast whitelist
# ---------------------------------------------------------------------------
# Allowed operand pairings for add/mul (in either order):
#   * identical shapes
#   * a 0-d scalar against anything
#   * equal rank with some extents 1 (numpy-aligned)
#   * rank r against rank r+1 with trailing extents equal
#     (a spatial [h, w] map applied across a leading channel axis)


def _broadcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == len(sb):
        return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
    lo, hi = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return len(hi) == len(lo) + 1 and hi[1:] == lo


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g, axes=tuple(range(g.values.ndim)))
    if len(shape) == len(g.shape):
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        return reduce_sum(g, axes=axes, keepdims=True)
    # [h, w] operand broadcast across a leading axis
    return reduce_sum(g, axes=(0,))


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.values + b.values, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make("mul", a.values * b.values, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _make("scale", x.values * c, (x,), vjp)


def divide(x: Tensor, d: float) -> Tensor:
    """Exact (correctly rounded) division by a scalar constant."""
    x = as_tensor(x)
    d = float(d)
    if d == 0.0:
        raise InputError("divide: divisor must be nonzero")

    def vjp(g):
        return (divide(g, d),)

    return _make("divide", x.values / d, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = Tensor((x.values > 0).astype(np.float64))  # derivative at 0 is 0

    def vjp(g):
        return (mul(g, mask),)

    return _make("relu", np.maximum(x.values, 0.0), (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out_vals = np.empty_like(v)
    pos = v >= 0
    out_vals[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out_vals[~pos] = ev / (1.0 + ev)

    def vjp(g):
        s = out  # d sigmoid = s * (1 - s), kept symbolic for double backward
        return (mul(g, mul(s, sub(ones(s.shape), s))),)

    out = _make("sigmoid", out_vals, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# matmul family
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make("matmul", a.values @ b.values, (a, b), vjp)


def bmatmul(a: Tensor, w: Tensor) -> Tensor:
    """Batched (B, m, k) @ (k, n) -> (B, m, n) with a shared right operand."""
    a, w = as_tensor(a), as_tensor(w)
    if a.values.ndim != 3 or w.values.ndim != 2 or a.shape[2] != w.shape[0]:
        raise DimensionError(f"bmatmul: shapes {a.shape} and {w.shape} are incompatible")
    B, m, k = a.shape
    n = w.shape[1]

    def vjp(g):
        da = bmatmul(g, transpose(w))
        dw = matmul(transpose(reshape(a, (B * m, k))), reshape(g, (B * m, n)))
        return da, dw

    return _make("bmatmul", a.values @ w.values, (a, w), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched (B, m, k) @ (B, k, n) -> (B, m, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 3 or b.values.ndim != 3 or a.shape[0] != b.shape[0] \
            or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm: shapes {a.shape} and {b.shape} are incompatible")

    def vjp(g):
        return bmm(g, permute(b, (0, 2, 1))), bmm(permute(a, (0, 2, 1)), g)

    return _make("bmm", a.values @ b.values, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {x.shape}")

    def vjp(g):
        return (transpose(g),)

    return _make("transpose", x.values.T, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and softmax
# ---------------------------------------------------------------------------


def _check_axes(x: Tensor, axes) -> tuple[int, ...]:
    axes = tuple(axes)
    nd = x.values.ndim
    norm = tuple(a % nd for a in axes)
    if len(set(norm)) != len(norm) or any(a < 0 or a >= nd for a in norm):
        raise InputError(f"invalid axes {axes} for shape {x.shape}")
    return norm


def _keepdims_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def reduce_sum(x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axes(x, axes)
    if not axes:
        return x
    kshape = _keepdims_shape(x.shape, axes)

    def vjp(g):
        gk = g if g.shape == kshape else reshape(g, kshape)
        return (mul(gk, ones(x.shape)),)

    vals = x.values.sum(axis=axes, keepdims=keepdims)
    return _make("sum", vals, (x,), vjp)


def reduce_mean(x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axes(x, axes)
    if not axes:
        return x
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axes, keepdims=keepdims), 1.0 / n)


def reduce_max(x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _check_axes(x, axes)
    if not axes:
        return x
    kshape = _keepdims_shape(x.shape, axes)
    vals = x.values.max(axis=axes, keepdims=True)
    # route gradient to the first maximal element (row-major order) per group
    moved = np.moveaxis(x.values, axes, range(x.values.ndim - len(axes), x.values.ndim))
    lead = moved.shape[: x.values.ndim - len(axes)]
    flat = moved.reshape(lead + (-1,))
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, np.argmax(flat, axis=-1)[..., None], 1.0, axis=-1)
    mask = Tensor(np.moveaxis(onehot.reshape(moved.shape),
                              range(x.values.ndim - len(axes), x.values.ndim), axes))

    def vjp(g):
        gk = g if g.shape == kshape else reshape(g, kshape)
        return (mul(gk, mask),)

    return _make("max", vals if keepdims else vals.reshape(
        tuple(n for i, n in enumerate(x.shape) if i not in axes)), (x,), vjp)


def reduce(op: str, x: Tensor, axes: Iterable[int], keepdims: bool = False) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op not in fns:
        raise InputError(f"unknown reduction {op!r}")
    return fns[op](x, axes, keepdims=keepdims)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (axis,) = _check_axes(x, (axis,))
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    vals = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        s = out
        inner = reduce_sum(mul(g, s), axes=(axis,), keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _make("softmax", vals, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}")
    old = x.shape

    def vjp(g):
        return (reshape(g, old),)

    return _make("reshape", x.values.reshape(shape), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat: need at least one tensor")
    nd = tensors[0].values.ndim
    axis = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(slice_(g, axis, int(offsets[i]), int(offsets[i + 1]))
                     for i in range(len(tensors)))

    vals = np.concatenate([t.values for t in tensors], axis=axis)
    return _make("concat", vals, tuple(tensors), vjp)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    nd = x.values.ndim
    axis = axis % nd
    if not (0 <= start < stop <= x.shape[axis]):
        raise InputError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(nd))
    full = x.shape

    def vjp(g):
        return (embed(g, axis, start, full),)

    return _make("slice", x.values[idx], (x,), vjp)


def embed(x: Tensor, axis: int, start: int, out_shape) -> Tensor:
    """Place ``x`` into a zero tensor of ``out_shape`` at ``start`` along ``axis``."""
    x = as_tensor(x)
    out_shape = tuple(out_shape)
    nd = len(out_shape)
    axis = axis % nd
    stop = start + x.shape[axis]
    vals = np.zeros(out_shape)
    idx = tuple(slice(None) if i != axis else slice(start, stop) for i in range(nd))
    vals[idx] = x.values

    def vjp(g):
        return (slice_(g, axis, start, stop),)

    return _make("embed", vals, (x,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.values.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation for shape {x.shape}")
    inverse = tuple(int(a) for a in np.argsort(axes))

    def vjp(g):
        return (permute(g, inverse),)

    return _make("permute", x.values.transpose(axes), (x,), vjp)


def axis_contract(x: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Contract ``axis`` of ``x`` with the rows of a constant matrix.

    ``out[..., j, ...] = sum_i x[..., i, ...] * matrix[i, j]`` — the workhorse
    for average pooling along one axis (``matrix`` holds the bin weights).
    """
    x = as_tensor(x)
    matrix = np.asarray(matrix, dtype=np.float64)
    nd = x.values.ndim
    axis = axis % nd
    if matrix.ndim != 2 or x.shape[axis] != matrix.shape[0]:
        raise DimensionError(
            f"axis_contract: axis {axis} of {x.shape} vs matrix {matrix.shape}")
    vals = np.moveaxis(np.tensordot(x.values, matrix, axes=([axis], [0])), -1, axis)

    def vjp(g):
        return (axis_contract(g, matrix.T, axis),)

    return _make("axis_contract", vals, (x,), vjp)


# ---------------------------------------------------------------------------
# convolution building blocks
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _conv_geometry(h, w, kh, kw, stride, padding):
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise InputError(f"bad stride {stride} / padding {padding}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(
            f"kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{w + 2 * pw})")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return sh, sw, ph, pw, oh, ow


def im2col(x: Tensor, kh: int, kw: int, stride=1, padding=0) -> Tensor:
    """Unfold (c, h, w) into (c*kh*kw, oh*ow); a leading frame axis is kept:
    (t, c, h, w) -> (t, c*kh*kw, oh*ow)."""
    x = as_tensor(x)
    nd = x.values.ndim
    if nd not in (3, 4):
        raise DimensionError(f"im2col: expected rank 3 or 4, got shape {x.shape}")
    c, h, w = x.shape[-3:]
    sh, sw, ph, pw, oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    pad = [(0, 0)] * (nd - 2) + [(ph, ph), (pw, pw)]
    padded = np.pad(x.values, pad)
    win = sliding_window_view(padded, (kh, kw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    # (..., c, oh, ow, kh, kw) -> (..., c, kh, kw, oh, ow)
    win = np.moveaxis(win, (-2, -1), (-4, -3))
    lead = x.shape[:-3]
    vals = np.ascontiguousarray(win).reshape(lead + (c * kh * kw, oh * ow))
    meta = (x.shape, kh, kw, stride, padding)

    def vjp(g):
        return (col2im(g, *meta),)

    return _make("im2col", vals, (x,), vjp)


def col2im(cols: Tensor, x_shape, kh: int, kw: int, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`im2col` (overlaps accumulate)."""
    cols = as_tensor(cols)
    x_shape = tuple(x_shape)
    c, h, w = x_shape[-3:]
    sh, sw, ph, pw, oh, ow = _conv_geometry(h, w, kh, kw, stride, padding)
    lead = x_shape[:-3]
    want = lead + (c * kh * kw, oh * ow)
    if cols.shape != want:
        raise DimensionError(f"col2im: got {cols.shape}, expected {want}")
    blocks = cols.values.reshape(lead + (c, kh, kw, oh, ow))
    padded = np.zeros(lead + (c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            padded[..., i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += \
                blocks[..., i, j, :, :]
    vals = padded[..., ph:ph + h, pw:pw + w]
    meta = (kh, kw, stride, padding)

    def vjp(g):
        return (im2col(g, *meta),)

    return _make("col2im", vals, (cols,), vjp)


def conv2d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlate one (c_in, h, w) image with (c_out, c_in, kh, kw) kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.values.ndim != 3 or kernels.values.ndim != 4 or x.shape[0] != kernels.shape[1]:
        raise DimensionError(
            f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    _, _, _, _, oh, ow = _conv_geometry(x.shape[1], x.shape[2], kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)
    kmat = reshape(kernels, (c_out, c_in * kh * kw))
    return reshape(matmul(kmat, cols), (c_out, oh, ow))


def conv2d_frames(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """Apply :func:`conv2d` to every frame of a (t, c_in, h, w) stack at once."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.values.ndim != 4 or kernels.values.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"conv2d_frames: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    t = x.shape[0]
    _, _, _, _, oh, ow = _conv_geometry(x.shape[2], x.shape[3], kh, kw, stride, padding)
    cols = im2col(x, kh, kw, stride, padding)                      # (t, ck2, L)
    kmat = reshape(kernels, (c_out, c_in * kh * kw))
    out = bmatmul(permute(cols, (0, 2, 1)), transpose(kmat))       # (t, L, c_out)
    return reshape(permute(out, (0, 2, 1)), (t, c_out, oh, ow))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Stabilized -log softmax(logits)[label] for a rank-1 logits vector."""
    logits = as_tensor(logits)
    if logits.values.ndim != 1:
        raise DimensionError(f"cross_entropy_logits: expected a vector, got {logits.shape}")
    m = logits.size
    label = int(label)
    if not 0 <= label < m:
        raise InputError(f"label {label} out of range for {m} classes")
    v = logits.values
    shift = v.max()
    lse = shift + np.log(np.exp(v - shift).sum())
    onehot = np.zeros(m)
    onehot[label] = 1.0
    hot = Tensor(onehot)

    def vjp(g):
        return (mul(reshape(g, (1,)), sub(softmax(logits, axis=0), hot)),)

    return _make("cross_entropy", np.asarray(lse - v[label]), (logits,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def trace(root: Tensor) -> Graph:
    """Collect the nodes reachable from ``root`` in creation order."""
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.out.uid)
    return Graph(nodes)


@contextmanager
def _null_ctx():
    yield


def _backprop(loss: Tensor, create_graph: bool,
              accumulate_fields: bool) -> dict[int, tuple[Tensor, Tensor]]:
    """Reverse sweep over the tape; returns {id: (leaf tensor, gradient)}.

    Each node's gradient rule runs exactly once; with ``accumulate_fields``
    the sweep also adds into the ``grad`` buffers of every requires_grad
    tensor it touches.
    """
    if loss.values.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    graph = trace(loss)
    table: dict[int, Tensor] = {id(loss): ones(loss.shape)}
    holders: dict[int, Tensor] = {id(loss): loss}
    ctx = _null_ctx() if create_graph else no_grad()
    with ctx:
        for node in reversed(graph.nodes):
            g = table.pop(id(node.out), None)
            if g is None:
                continue
            if accumulate_fields and node.out.requires_grad:
                prev = node.out.grad
                node.out.grad = g.values if prev is None else prev + g.values
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                held = table.get(id(t))
                table[id(t)] = gi if held is None else add(held, gi)
                holders[id(t)] = t
    # entries still in the table were never a node output: they are leaves
    leaves = {k: (holders[k], g) for k, g in table.items()}
    if accumulate_fields:
        for t, g in leaves.values():
            prev = t.grad
            t.grad = g.values.copy() if prev is None else prev + g.values
    return leaves


def backward(loss: Tensor, create_graph: bool = False) -> None:
    """Accumulate d loss / d t into ``t.grad`` for every tensor below ``loss``.

    Repeated calls keep accumulating. With ``create_graph`` the gradient
    computation is recorded and can be differentiated again.
    """
    _backprop(loss, create_graph, accumulate_fields=True)


def grads(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Functional gradients of a scalar loss, without touching ``.grad`` fields.

    Disconnected entries come back as zero tensors.
    """
    table = _backprop(loss, create_graph, accumulate_fields=False)
    out = []
    for t in wrt:
        hit = table.get(id(t))
        out.append(hit[1] if hit is not None else zeros(t.shape))
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor and must not mutate its input.
    Error metric per coordinate: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    probe = Tensor(x.values.copy(), requires_grad=True)
    out = f(probe)
    if out.values.size != 1:
        raise UsageError("grad_check: function must be scalar-valued")
    backward(out)
    g_ad = probe.grad.ravel().copy()

    g_fd = np.zeros_like(g_ad)
    flat = x.values.ravel()
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += step
        with no_grad():
            hi = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - step
        with no_grad():
            lo = f(Tensor(bumped.reshape(x.shape))).item()
        g_fd[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
