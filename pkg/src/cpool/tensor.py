"""Dense 4-D tensors with a tape-based reverse-mode gradient engine.

Every feature map, weight and schedule is a ``Tensor`` with exactly four
extents (batch, channel, height, width for activations).  Operations that
see at least one ``requires_grad`` input while a :class:`GradGraph` is active
append a node to that graph; :func:`backward` walks the nodes in reverse
execution order.  Outside a graph the same calls run as plain numpy.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from . import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


_ACTIVE: contextvars.ContextVar["GradGraph | None"] = contextvars.ContextVar(
    "cpool_active_graph", default=None
)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor needs exactly 4 extents, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- construction helpers ------------------------------------------------
    @classmethod
    def zeros(cls, shape, dtype=np.float64, requires_grad=False):
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def scalar(cls, value, dtype=np.float64):
        return cls(np.full((1, 1, 1, 1), value, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def relu(self):
        return relu(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


class Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable, op: str):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class GradGraph:
    """Append-only tape of executed primitives.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded when any operand requires a gradient.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "GradGraph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor) -> "Gradients":
        return backward(root, self)


class Gradients:
    """Mapping from tensors to accumulated gradients.

    Tensors that were never reached map to zeros of their own shape.
    """

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._tensors.get(id(t)) is t

    def __len__(self):
        return len(self._grads)


def active_graph() -> GradGraph | None:
    return _ACTIVE.get()


@contextlib.contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def _recording(inputs: Sequence[Tensor]) -> bool:
    return _ACTIVE.get() is not None and any(t.requires_grad for t in inputs)


def _record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    graph = _ACTIVE.get()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        graph.nodes.append(Node(out, tuple(inputs), backward_fn, op))
    return out


def backward(root: Tensor, graph: GradGraph) -> Gradients:
    """Reverse sweep over ``graph`` from a single-element ``root``.

    Every ``requires_grad`` tensor reached receives its gradient in the
    returned map; leaves (tensors not produced by a recorded node) also get
    ``.grad`` set.
    """
    if root.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    tensors: dict[int, Tensor] = {id(root): root}
    produced = set()
    for node in reversed(graph.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            if prev is None:
                grads[key] = np.array(gi, dtype=t.dtype, copy=True)
                tensors[key] = t
            else:
                prev += gi
    for key, t in tensors.items():
        if key not in produced and t is not root:
            t.grad = grads[key]
    return Gradients(grads, tensors)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def _as_operand(b, like: Tensor):
    if isinstance(b, Tensor):
        if b.shape != like.shape:
            raise ShapeError("elementwise", like.shape, b.shape)
        return b
    if np.isscalar(b):
        return float(b)
    raise TypeError(f"unsupported operand {type(b).__name__}")


def add(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    if not isinstance(b, Tensor):
        return _record(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def advance(x: Tensor, inc: Tensor) -> Tensor:
    """``x + inc``, where a strictly positive increment always moves ``x``.

    An increment below half an ulp would otherwise round away and leave a
    pixel stuck just under a larger neighbour; such entries step to the next
    representable value instead.  Gradients are those of plain addition.
    """
    _as_operand(inc, x)
    xd, idata = x.data, inc.data
    out = xd + idata
    stuck = (idata > 0) & (out == xd)
    if stuck.any():
        out[stuck] = np.nextafter(xd[stuck], np.inf)
    return _record(out, (x, inc), lambda g: (g, g), "advance")


def sub(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    if not isinstance(b, Tensor):
        return _record(a.data - a.dtype.type(b), (a,), lambda g: (g,), "sub_scalar")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_operand(b, a)
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scalar_mul")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def max2(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    _as_operand(b, a)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _record(out, (a, b), lambda g: (g * take_a, g * ~take_a), "max2")


def primitive_elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name over the elementwise primitive set."""
    table = {"add": add, "sub": sub, "mul": mul, "max2": max2}
    if op == "relu":
        return relu(a)
    if op == "scalar_mul":
        return scalar_mul(a, b)
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# reductions and reshapes
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(
        np.full((1, 1, 1, 1), a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g.reshape(()), shape),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    return scalar_mul(sum_all(a), 1.0 / a.size)


def flatten(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C*H*W, 1, 1)."""
    shape = a.shape
    out = a.data.reshape(shape[0], -1, 1, 1)
    return _record(out, (a,), lambda g: (g.reshape(shape),), "flatten")


def channel_scale(x: Tensor, strengths: Tensor, row: int = 0) -> Tensor:
    """Multiply channel ``c`` of ``x`` by ``strengths[row, c]``.

    ``strengths`` has shape (rows, C, 1, 1); only the selected row receives
    gradient.
    """
    rows, c = strengths.shape[:2]
    if c != x.shape[1] or strengths.shape[2:] != (1, 1):
        raise ShapeError("channel_scale", x.shape, strengths.shape)
    if not 0 <= row < rows:
        raise IndexError(f"strength row {row} out of range for {rows} rows")
    s = strengths.data[row].reshape(1, c, 1, 1).astype(x.dtype, copy=False)
    xd = x.data

    def bw(g):
        gs = np.zeros(strengths.shape, dtype=strengths.dtype)
        gs[row] = (g * xd).sum(axis=(0, 2, 3)).reshape(c, 1, 1)
        return g * s, gs

    return _record(xd * s, (x, strengths), bw, "channel_scale")


def relax_toward(x: Tensor, target: Tensor, strengths: Tensor, row: int = 0) -> Tensor:
    """Per-channel Euler relaxation ``x + s_c * (target - x)``.

    Evaluated from whichever endpoint is closer in ``s`` so that ``s == 0``
    returns ``x`` and ``s == 1`` returns ``target`` bit for bit.  A positive
    ``s`` never rounds to a zero move: such entries take one ulp toward the
    target.  Gradients are the analytic ones of the linear form.
    """
    if target.shape != x.shape:
        raise ShapeError("relax_toward", x.shape, target.shape)
    rows, c = strengths.shape[:2]
    if c != x.shape[1]:
        raise ShapeError("relax_toward", x.shape, strengths.shape)
    s = strengths.data[row].reshape(1, c, 1, 1).astype(x.dtype, copy=False)
    xd, td = x.data, target.data
    diff = td - xd
    near_target = s >= 0.5
    if not near_target.any():
        out = xd + s * diff
    elif near_target.all():
        out = td - (1 - s) * diff
    else:
        out = np.where(near_target, td - (1 - s) * diff, xd + s * diff)
    stuck = (out == xd) & (diff != 0) & (s > 0)
    if stuck.any():
        out[stuck] = np.nextafter(xd, td)[stuck]

    def bw(g):
        gs = np.zeros(strengths.shape, dtype=strengths.dtype)
        gs[row] = (g * diff).sum(axis=(0, 2, 3)).reshape(c, 1, 1)
        return g * (1 - s), g * s, gs

    return _record(out, (x, target, strengths), bw, "relax_toward")


# ---------------------------------------------------------------------------
# spatial primitives
# ---------------------------------------------------------------------------

def _shift_axis(arr: np.ndarray, d: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.arange(n) + d, 0, n - 1)
    return np.take(arr, idx, axis=axis)


def _shift_axis_adjoint(g: np.ndarray, d: int, axis: int) -> np.ndarray:
    n = g.shape[axis]
    if d == 0:
        return g
    g = np.moveaxis(g, axis, 0)
    out = np.zeros_like(g)
    m = min(abs(d), n)
    if d > 0:
        # out[k] = x[k+d] for k < n-d, x[n-1] beyond
        out[d:] += g[: n - d] if d < n else 0
        out[n - 1] += g[n - m :].sum(axis=0)
    else:
        out[: n - m] += g[m:]
        out[0] += g[:m].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """``out[..., i, j] = x[..., clip(i+dy), clip(j+dx)]`` (edge replication)."""
    out = _shift_axis(_shift_axis(x.data, dy, 2), dx, 3)

    def bw(g):
        return (_shift_axis_adjoint(_shift_axis_adjoint(g, dx, 3), dy, 2),)

    return _record(out, (x,), bw, "shift")


def neighborhood_max_with_index(x: np.ndarray, radius: int):
    """Stride-1 (2r+1)^2 window max with replicate borders.

    Returns the maxima and, per output pixel, the flat offset of its source
    element in ``x``.  Ties resolve to the first maximal element in
    row-major order: columns are scanned first inside each row, then rows.
    """
    return _kernels.dilate_argmax(np.ascontiguousarray(x), int(radius))


def neighborhood_max(x: Tensor, radius: int, boundary: str = "replicate") -> Tensor:
    """Morphological dilation with a (2r+1)x(2r+1) square, stride 1.

    The gradient of each output pixel is routed to its argmax.
    """
    if boundary != "replicate":
        raise ValueError(f"unsupported boundary {boundary!r}")
    if int(radius) != radius or radius < 1:
        raise ValueError(f"radius must be a positive integer, got {radius!r}")
    if not _recording((x,)):
        return Tensor(_kernels.dilate(np.ascontiguousarray(x.data), int(radius)))
    out, idx = neighborhood_max_with_index(x.data, int(radius))
    return _record(out, (x,), lambda g: (_kernels.scatter_flat(np.ascontiguousarray(g), idx),),
                   "neighborhood_max")


def neighbor_excess_sum(x: Tensor) -> Tensor:
    """``sum_k relu(x_k - x)`` over the 8-connected neighbours that lie inside the image.

    Fused forward and backward in one pass each; a zero difference passes no
    gradient, matching ``relu``.
    """
    xd = np.ascontiguousarray(x.data)
    return _record(_kernels.neighbor_excess(xd), (x,),
                   lambda g: (_kernels.neighbor_excess_adjoint(xd, np.ascontiguousarray(g)),),
                   "neighbor_excess_sum")


def _im2col(xd: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(Ci*kh*kw, B*Ho*Wo) patch matrix; each tap is one contiguous slab copy."""
    b, ci, h, w = xd.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((ci, kh, kw, b, ho, wo), dtype=xd.dtype)
    xt = xd.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols.reshape(ci * kh * kw, b * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid cross-correlation, stride 1.  w: (Co, Ci, k, k), b: (1, Co, 1, 1)."""
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError("conv2d", x.shape, w.shape)
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    bsz, _, h, wd_ = x.shape
    ho, wo = h - kh + 1, wd_ - kw + 1
    w2 = w.data.reshape(co, -1)
    cols = _im2col(x.data, kh, kw)
    out = w2 @ cols
    inputs: tuple = (x, w)
    if b is not None:
        if b.shape != (1, co, 1, 1):
            raise ShapeError("conv2d bias", (1, co, 1, 1), b.shape)
        out += b.data.reshape(co, 1)
        inputs = (x, w, b)
    out = np.ascontiguousarray(out.reshape(co, bsz, ho, wo).transpose(1, 0, 2, 3))
    need_gx = x.requires_grad

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(co, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if need_gx:
            gcol = (w2.T @ g2).reshape(ci, kh, kw, bsz, ho, wo)
            gxt = np.zeros((ci, bsz, h, wd_), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + ho, j : j + wo] += gcol[:, i, j]
            gx = gxt.transpose(1, 0, 2, 3)
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))
        return tuple(res)

    return _record(out, inputs, bw, "conv2d")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully connected layer.  x: (B, F, 1, 1), w: (O, F, 1, 1), b: (1, O, 1, 1)."""
    if x.shape[2:] != (1, 1) or x.shape[1] != w.shape[1]:
        raise ShapeError("dense", x.shape, w.shape)
    x2 = x.data.reshape(x.shape[0], -1)
    w2 = w.data.reshape(w.shape[0], -1)
    out = x2 @ w2.T
    inputs: tuple = (x, w)
    if b is not None:
        if b.shape != (1, w.shape[0], 1, 1):
            raise ShapeError("dense bias", (1, w.shape[0], 1, 1), b.shape)
        out = out + b.data.reshape(1, -1)
        inputs = (x, w, b)

    def bw(g):
        g2 = g.reshape(g.shape[0], -1)
        res = [(g2 @ w2).reshape(x.shape), (g2.T @ x2).reshape(w.shape)]
        if b is not None:
            res.append(g2.sum(axis=0).reshape(b.shape))
        return tuple(res)

    return _record(out.reshape(x.shape[0], -1, 1, 1), inputs, bw, "dense")


def permute_channels(x: Tensor, perm: Sequence[int]) -> Tensor:
    """``out[:, i] = x[:, perm[i]]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(x.shape[1])):
        raise ValueError("perm must be a permutation of the channel indices")
    inv = np.argsort(perm)
    return _record(x.data[:, perm], (x,), lambda g: (g[:, inv],), "permute_channels")


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _record(x.data[:, start:stop], (x,), bw, "slice_channels")
