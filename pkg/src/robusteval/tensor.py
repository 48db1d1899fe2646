"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operators needed by the multi-resolution defense and the attacks are
provided. Every public operation returns a :class:`Tensor`; when any input
requires a gradient the result keeps a reference to the :class:`Node` that
produced it, and :meth:`Tensor.backward` walks those nodes in reverse
topological order.

Conventions:

* images are NCHW inside the engine;
* ``amax`` and ``sort`` route gradients to the source position of the selected
  element, ties resolved toward the lowest index;
* ``resize_bilinear`` uses the corner-aligned convention (output corners sample
  input corners exactly) for both down- and upscaling;
* ``add_noise`` adds a constant: the sampled noise carries no gradient.
"""

from __future__ import annotations

import functools
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "DimensionError",
    "NumericError",
    "StaleGraphError",
    "FormatError",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "sum",
    "mean",
    "amax",
    "sort",
    "take",
    "gather",
    "minimum",
    "reshape",
    "transpose",
    "concat",
    "relu",
    "linear",
    "conv2d",
    "maxpool2d",
    "resize_bilinear",
    "add_noise",
    "cross_entropy",
    "topo_order",
    "save_tensor",
    "load_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the operator."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class StaleGraphError(RuntimeError):
    """backward() was called on a graph that has already been consumed."""


class FormatError(ValueError):
    """Malformed binary artifact. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class Node:
    """One recorded operation: its inputs and a closure mapping the output
    gradient to per-input gradients (``None`` for inputs that need none)."""

    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf that
        requires one. The graph is consumed; a second call raises
        :class:`StaleGraphError`."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        if self.node is None:
            if self.requires_grad:
                self.grad = _accumulate(self.grad, np.ones_like(self.data))
            return
        order = topo_order(self)
        if any(n.consumed for n in order):
            raise StaleGraphError("graph already consumed by a previous backward(); re-run forward")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t_node, out in _reverse_pairs(self, order):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                t_node.consumed = True
                continue
            in_grads = t_node.backward_fn(g_out)
            for inp, g in zip(t_node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    g = _unbroadcast(g, inp.shape)
                if inp.node is None:
                    inp.grad = _accumulate(inp.grad, g)
                else:
                    grads[id(inp)] = _accumulate(grads.get(id(inp)), g)
            t_node.consumed = True


def _accumulate(acc, g):
    if acc is None:
        return np.array(g, copy=True)
    return acc + g


def topo_order(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root`` in dependency order (inputs first).

    Iterative DFS so deep graphs (long attack unrolls never happen here, but
    training chains can be long) do not hit the recursion limit.
    """
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if t.node is None:
            continue
        if expanded:
            order.append(t.node)
            continue
        if id(t.node) in seen:
            continue
        seen.add(id(t.node))
        stack.append((t, True))
        for inp in reversed(t.node.inputs):
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return order


def _reverse_pairs(root: Tensor, order: list[Node]):
    # map node -> output tensor; each node has exactly one output
    outputs: dict[int, Tensor] = {id(root.node): root}
    for node in order:
        for inp in node.inputs:
            if inp.node is not None:
                outputs[id(inp.node)] = inp
    for node in reversed(order):
        yield node, outputs[id(node)]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype if dtype is not None else np.float32)


def _make(op: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


# --- elementwise -----------------------------------------------------------

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def minimum(x: Tensor, bound: float) -> Tensor:
    """Elementwise ``min(x, bound)``; gradient is zero where clamped
    (including equality)."""
    keep = x.data < bound
    out = np.where(keep, x.data, np.asarray(bound, dtype=x.dtype)).astype(x.dtype)
    return _make("minimum", out, (x,), lambda g: (g * keep,))


def add_noise(x: Tensor, std: float, rng: np.random.Generator | None, shape=None) -> Tensor:
    """Add N(0, std^2) noise drawn from ``rng``. The noise is a constant for
    differentiation. ``shape`` lets callers draw a broadcastable sample (for
    example one draw shared across a batch)."""
    if rng is None or std == 0:
        return x
    noise = rng.standard_normal(shape if shape is not None else x.shape).astype(x.dtype) * x.dtype.type(std)
    return _make("add_noise", x.data + noise, (x,), lambda g: (g,))


# --- reductions and selection ---------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    scale = x.dtype.type(1.0 / count)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _make("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), back)


def amax(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal position."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _make("amax", out if keepdims else np.squeeze(out, axis), (x,), back)


def sort(x: Tensor, axis: int, descending: bool = False) -> Tensor:
    """Stable sort along ``axis``. Equal values keep their original order, so
    in both directions ties are emitted lowest index first."""
    axis = axis % x.ndim
    key = -x.data if descending else x.data
    perm = np.argsort(key, axis=axis, kind="stable")
    out = np.take_along_axis(x.data, perm, axis=axis)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, perm, g, axis=axis)
        return (full,)

    return _make("sort", out, (x,), back)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (drops the axis)."""
    axis = axis % x.ndim
    if not -x.shape[axis] <= index < x.shape[axis]:
        raise DimensionError(f"take: index {index} out of range for axis of size {x.shape[axis]}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make("take", np.take(x.data, index, axis=axis), (x,), back)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient scatter-add."""
    axis = axis % x.ndim
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != x.ndim:
        raise DimensionError(f"gather: index rank {indices.ndim} != tensor rank {x.ndim}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        # put_along_axis overwrites; gather indices may repeat so add instead
        lead = np.indices(indices.shape, sparse=True)
        lead = list(lead)
        lead[axis] = indices
        np.add.at(full, tuple(lead), g)
        return (full,)

    return _make("gather", np.take_along_axis(x.data, indices, axis=axis), (x,), back)


# --- structure -------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {old} -> {tuple(shape)}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default for NCHW)."""
    xs = tuple(xs)
    if not xs:
        raise DimensionError("concat: empty input")
    ref = xs[0].shape
    axis = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref} on axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


# --- layers ----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (N, F), ``weight`` (C, F)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    inputs: tuple = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        inputs = (x, weight, bias)

    def back(g):
        grads = [g @ wd if x.requires_grad else None, g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make("linear", out, inputs, back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation. ``x`` (N, Cin, H, W), ``weight``
    (Cout, Cin, kh, kw). Implemented as im2col + matmul."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    inputs: tuple = (x, weight) if bias is None else (x, weight, bias)
    xshape, pshape = x.shape, xp.shape

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(pshape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + xshape[2], padding:padding + xshape[3]] if padding else gxp
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _make("conv2d", np.ascontiguousarray(out), inputs, back)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max-pool; trailing rows/cols that do
    not fill a window are dropped. First maximum in row-major window order
    receives the gradient."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d: input {x.shape} smaller than window {size}")
    xc = x.data[:, :, :ho * size, :wo * size]
    win = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :ho * size, :wo * size] = (
            gw.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        )
        return (gx,)

    return _make("maxpool2d", out, (x,), back)


@functools.lru_cache(maxsize=64)
def _bilinear_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, corner-aligned: output sample ``o``
    reads input coordinate ``o * (n_in - 1) / (n_out - 1)``. Rows sum to 1."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    out = m.astype(dtype)
    out.setflags(write=False)
    return out


def resize_bilinear(x: Tensor, size: int | tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes of an NCHW tensor."""
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear: expected NCHW, got {x.shape}")
    ho, wo = (size, size) if isinstance(size, int) else size
    if ho < 1 or wo < 1:
        raise DimensionError(f"resize_bilinear: invalid target size {size}")
    h, w = x.shape[2:]
    if (ho, wo) == (h, w):
        return x
    mh = _bilinear_matrix(h, ho, x.dtype.str)
    mw = _bilinear_matrix(w, wo, x.dtype.str)
    out = mh @ x.data @ mw.T
    return _make("resize_bilinear", out, (x,), lambda g: (mh.T @ g @ mw,))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample softmax cross-entropy, shape (N,), for logits (N, C)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {logits.shape[0]} rows")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = lse - shifted[rows, labels]
    probs = np.exp(shifted - lse[:, None])

    def back(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * g[:, None],)

    return _make("cross_entropy", loss, (logits,), back)


# --- serialization ---------------------------------------------------------

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_tensor(f: BinaryIO, arr) -> None:
    """Write ``arr`` as a TNSR record: magic, u32 version, u8 dtype code,
    u32 rank, u32 dims, raw little-endian buffer."""
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    f.write(TNSR_MAGIC)
    f.write(struct.pack("<IBI", TNSR_VERSION, _DTYPE_CODES[dt], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    pos = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}", pos)
    return buf


def load_tensor(f: BinaryIO) -> np.ndarray:
    start = f.tell()
    if _read_exact(f, 4, "TNSR magic") != TNSR_MAGIC:
        raise FormatError("bad TNSR magic", start)
    pos = f.tell()
    version, code, rank = struct.unpack("<IBI", _read_exact(f, 9, "TNSR header"))
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}", pos)
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", pos + 4)
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "TNSR dims"))
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    buf = _read_exact(f, count * dt.itemsize, "TNSR buffer")
    return np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
