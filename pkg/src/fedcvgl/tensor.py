"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (up to 4-D, N x C x H x W row-major), store values in
float32 by default and accumulate reductions in float64. The op graph is built
define-by-run: each op output remembers its parent tensors and a closure that
propagates the incoming gradient. ``backward`` walks the graph once in reverse
topological order. Graphs are confined to the thread that built them; distinct
graphs may run concurrently.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "SingularSystem",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "scalar_mul",
    "cos",
    "sin",
    "sqrt",
    "absval",
    "wrap_angle",
    "tsum",
    "sum_scalars",
    "mean_masked",
    "masked_dot",
    "dot",
    "concat_channels",
    "upsample2x_nearest",
    "conv2d",
    "grid_sample_bilinear",
    "spatial_gradient",
    "gather_scalar",
    "stack_scalars",
    "scale",
    "adds",
    "apply_mask",
    "slice_channels",
    "select_channel",
    "bmul",
    "select_batch",
    "stack_batch",
    "solve3",
    "solve3_scalars",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names the dims."""


class SingularSystem(RuntimeError):
    """Raised by solve3 when the system stays singular after regularization."""


_state = threading.local()
_DTYPE = np.float32


def tune_allocator() -> bool:
    """Keep big scratch buffers (im2col and friends) inside the malloc arena.

    glibc hands allocations above the mmap threshold straight back to the OS,
    so every forward pass pays page-fault costs again; raising the thresholds
    roughly triples conv throughput here. No-op on non-glibc platforms.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_mmap_threshold, m_trim_threshold = -3, -1
        ok = libc.mallopt(m_mmap_threshold, 512 * 1024 * 1024)
        ok &= libc.mallopt(m_trim_threshold, 512 * 1024 * 1024)
        return bool(ok)
    except Exception:
        return False


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for newly created tensors (float32 or float64)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the storage dtype (the f64 oracle-test mode)."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_blas_threads(n: int) -> bool:
    """Cap BLAS threads at runtime (worker processes set 1 to avoid
    oversubscription). Uses the openblas control symbol if numpy links it."""
    try:
        import ctypes

        lib = ctypes.CDLL(None)
        lib.openblas_set_num_threads(int(n))
        return True
    except Exception:
        return False


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording; ops run as plain numpy."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A dense array with optional gradient tracking.

    Data is immutable after creation except for ``grad`` accumulation during
    backward. ``requires_grad`` marks leaves to optimize; op outputs inherit it
    from their parents.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most 4-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._done = False

    # -- construction used by ops (shared with geometry's fused primitives) --
    @staticmethod
    def from_op(data: np.ndarray, parents, backward_fn, op: str = "op") -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._op = op
        out._done = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"


class Graph:
    """Topologically ordered view of the op DAG that ends at ``root``.

    Node inputs always precede the node; backward visits the exact reverse.
    """

    def __init__(self, root: Tensor):
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor feeding ``loss``.

    ``loss`` must be scalar. A second call on the same output without a fresh
    forward pass is an error (the graph is single-use).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass first")
    loss._done = True
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # graph is single-use; free saved activations eagerly
            node._backward = None
            if node is not loss:
                node.grad = None


# ---------------------------------------------------------------------------
# elementwise & scalar ops
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return Tensor.from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return Tensor.from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd)
        if b.requires_grad:
            b.accumulate_grad(g * ad)

    return Tensor.from_op(ad * bd, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    bd = b.data
    if np.any(bd == 0.0):
        raise ZeroDivisionError("div: zero denominator")
    out = a.data / bd
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / bd)
        if b.requires_grad:
            b.accumulate_grad(-g * ad / (bd * bd))

    return Tensor.from_op(out, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate_grad(-g)

    return Tensor.from_op(-a.data, (a,), bwd, "neg")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bwd(g):
        a.accumulate_grad(g * pos)

    return Tensor.from_op(np.where(pos, a.data, 0.0).astype(a.data.dtype), (a,), bwd, "relu")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(g):
        a.accumulate_grad(g * c)

    return Tensor.from_op(a.data * c, (a,), bwd, "scalar_mul")


def cos(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        a.accumulate_grad(-g * np.sin(ad))

    return Tensor.from_op(np.cos(ad), (a,), bwd, "cos")


def sin(a: Tensor) -> Tensor:
    ad = a.data

    def bwd(g):
        a.accumulate_grad(g * np.cos(ad))

    return Tensor.from_op(np.sin(ad), (a,), bwd, "sin")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(a.data)
    safe = np.maximum(out, a.data.dtype.type(1e-12))

    def bwd(g):
        a.accumulate_grad(g * 0.5 / safe)

    return Tensor.from_op(out, (a,), bwd, "sqrt")


def absval(a: Tensor) -> Tensor:
    s = np.sign(a.data)

    def bwd(g):
        a.accumulate_grad(g * s)

    return Tensor.from_op(np.abs(a.data), (a,), bwd, "abs")


def wrap_angle(a: Tensor) -> Tensor:
    """Wrap radians into [-pi, pi); an integer-multiple-of-2pi shift, so the
    gradient passes through unchanged."""
    out = np.mod(a.data + np.pi, 2.0 * np.pi) - np.pi

    def bwd(g):
        a.accumulate_grad(g)

    return Tensor.from_op(out.astype(a.data.dtype), (a,), bwd, "wrap_angle")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad(np.broadcast_to(g, shape).astype(a.data.dtype))

    return Tensor.from_op(out, (a,), bwd, "sum")


def sum_scalars(scalars: list) -> Tensor:
    """Sum a list of scalar tensors with float64 accumulation."""
    if not scalars:
        raise ShapeError("sum_scalars: empty input list")
    total = np.asarray(sum(float(s.data) for s in scalars), dtype=scalars[0].data.dtype)

    def bwd(g):
        for s in scalars:
            if s.requires_grad:
                s.accumulate_grad(g)

    return Tensor.from_op(total, tuple(scalars), bwd, "sum_scalars")


def _broadcast_mask(mask: np.ndarray, shape: tuple) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape == shape:
        return m
    if m.shape == shape[-m.ndim:]:
        return np.broadcast_to(m, shape)
    raise ShapeError(f"mask shape {m.shape} does not broadcast over {shape}")


def mean_masked(a: Tensor, mask) -> Tensor:
    """Mean of the entries selected by ``mask``; an all-false mask yields 0."""
    m = _broadcast_mask(mask, a.data.shape).astype(bool)
    n = int(m.sum())
    denom = max(1, n)
    out = np.asarray(np.sum(a.data, where=m, dtype=np.float64) / denom, dtype=a.data.dtype)

    def bwd(g):
        a.accumulate_grad((g / a.data.dtype.type(denom)) * m)

    return Tensor.from_op(out, (a,), bwd, "mean_masked")


def masked_dot(a: Tensor, b: Tensor, mask) -> Tensor:
    """Scalar sum of a*b over the mask, accumulated in float64."""
    _check_same_shape(a, b, "masked_dot")
    m = _broadcast_mask(mask, a.data.shape)
    prod = a.data * b.data * m
    out = np.asarray(np.sum(prod, dtype=np.float64), dtype=a.data.dtype)
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd * m)
        if b.requires_grad:
            b.accumulate_grad(g * ad * m)

    return Tensor.from_op(out, (a, b), bwd, "masked_dot")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Scalar sum of a*b over all entries, accumulated in float64."""
    _check_same_shape(a, b, "dot")
    ad, bd = a.data, b.data
    out = np.asarray(np.sum(ad * bd, dtype=np.float64), dtype=ad.dtype)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd)
        if b.requires_grad:
            b.accumulate_grad(g * ad)

    return Tensor.from_op(out, (a, b), bwd, "dot")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 for 3-D, axis 1 for 4-D)."""
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    nd = tensors[0].data.ndim
    axis = 0 if nd == 3 else 1
    for t in tensors:
        if t.data.ndim != nd:
            raise ShapeError(f"concat_channels: rank mismatch {t.data.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = (slice(None),) * axis + (slice(lo, hi),)
                t.accumulate_grad(g[idx])

    return Tensor.from_op(out, tuple(tensors), bwd, "concat")


def upsample2x_nearest(a: Tensor) -> Tensor:
    nd = a.data.ndim
    if nd not in (3, 4):
        raise ShapeError(f"upsample2x_nearest: need 3-D or 4-D, got {a.data.shape}")
    out = np.repeat(np.repeat(a.data, 2, axis=nd - 2), 2, axis=nd - 1)

    def bwd(g):
        s = g.shape
        blocks = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        a.accumulate_grad(blocks.sum(axis=(-3, -1)))

    return Tensor.from_op(out, (a,), bwd, "upsample2x")


def gather_scalar(a: Tensor, index: int) -> Tensor:
    flat = a.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise ShapeError(f"gather_scalar: index {index} out of range for {a.data.shape}")
    out = np.asarray(flat[index], dtype=a.data.dtype)
    shape = a.data.shape

    def bwd(g):
        buf = np.zeros(shape, dtype=a.data.dtype)
        buf.reshape(-1)[index] = g
        a.accumulate_grad(buf)

    return Tensor.from_op(out, (a,), bwd, "gather")


def stack_scalars(scalars: list[Tensor], dims: tuple = None) -> Tensor:
    vals = np.array([s.data.reshape(()) for s in scalars], dtype=_DTYPE)
    if dims is not None:
        vals = vals.reshape(dims)

    def bwd(g):
        gf = g.reshape(-1)
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s.accumulate_grad(np.asarray(gf[i], dtype=s.data.dtype))

    return Tensor.from_op(vals, tuple(scalars), bwd, "stack")


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a map by a scalar tensor (broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"scale: scalar operand has shape {s.data.shape}")
    sv = s.data.reshape(())
    ad = a.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * sv)
        if s.requires_grad:
            s.accumulate_grad(np.asarray(np.sum(g * ad, dtype=np.float64), dtype=s.data.dtype))

    return Tensor.from_op(ad * sv, (a, s), bwd, "scale")


def adds(a: Tensor, s: Tensor) -> Tensor:
    """Add a scalar tensor to a map (broadcast)."""
    if s.data.size != 1:
        raise ShapeError(f"adds: scalar operand has shape {s.data.shape}")
    sv = s.data.reshape(())

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if s.requires_grad:
            s.accumulate_grad(np.asarray(np.sum(g, dtype=np.float64), dtype=s.data.dtype))

    return Tensor.from_op(a.data + sv, (a, s), bwd, "adds")


def apply_mask(a: Tensor, mask) -> Tensor:
    """Zero entries outside a constant 0/1 mask (broadcast over channels)."""
    m = _broadcast_mask(mask, a.data.shape).astype(a.data.dtype)

    def bwd(g):
        a.accumulate_grad(g * m)

    return Tensor.from_op(a.data * m, (a,), bwd, "mask")


def slice_channels(a: Tensor, lo: int, hi: int) -> Tensor:
    """Channels [lo, hi) of a C x H x W tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"slice_channels: need 3-D, got {a.data.shape}")
    c = a.data.shape[0]
    if not 0 <= lo < hi <= c:
        raise ShapeError(f"slice_channels: bad range [{lo}, {hi}) for {c} channels")

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[lo:hi] = g
        a.accumulate_grad(buf)

    return Tensor.from_op(a.data[lo:hi], (a,), bwd, "slice_channels")


def select_channel(a: Tensor, i: int) -> Tensor:
    """Pick channel i of a C x H x W tensor as an H x W tensor."""
    if a.data.ndim != 3:
        raise ShapeError(f"select_channel: need 3-D, got {a.data.shape}")
    c = a.data.shape[0]
    if not 0 <= i < c:
        raise ShapeError(f"select_channel: index {i} out of range for {c} channels")

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        a.accumulate_grad(buf)

    return Tensor.from_op(a.data[i], (a,), bwd, "select_channel")


def bmul(a: Tensor, b: Tensor) -> Tensor:
    """Multiply a C x H x W map by an H x W map (broadcast over channels)."""
    if a.data.ndim != 3 or b.data.ndim != 2 or a.data.shape[1:] != b.data.shape:
        raise ShapeError(f"bmul: want C x H x W times H x W, got {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * bd)
        if b.requires_grad:
            b.accumulate_grad(np.sum(g * ad, axis=0))

    return Tensor.from_op(ad * bd, (a, b), bwd, "bmul")


def select_batch(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError(f"select_batch: need 4-D, got {a.data.shape}")
    n = a.data.shape[0]
    if not 0 <= i < n:
        raise ShapeError(f"select_batch: index {i} out of range for batch {n}")

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[i] = g
        a.accumulate_grad(buf)

    return Tensor.from_op(a.data[i], (a,), bwd, "select_batch")


def stack_batch(tensors: list[Tensor]) -> Tensor:
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack_batch: mixed shapes {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate_grad(g[i])

    return Tensor.from_op(out, tuple(tensors), bwd, "stack_batch")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), differentiable in x, kernel, bias.

    x: N x Cin x H x W, kernel: Cout x Cin x k x k (k odd), bias: Cout.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D N x C x H x W, got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got {kernel.data.shape}")
    cout, cin, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    n, cx, h, w = x.data.shape
    if cx != cin:
        raise ShapeError(f"conv2d: input channels {cx} != kernel Cin {cin} (input {x.data.shape}, kernel {kernel.data.shape})")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.data.shape} kernel {kh} stride {stride} padding {padding}")

    if padding > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(w2[None], cols)
    out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)
    # checkpointing: keep the (small) padded input, rebuild the column buffer
    # in backward; the live col buffers otherwise dominate the graph's memory
    del cols

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=(0, 2), dtype=np.float64).astype(bias.data.dtype))
        if kernel.requires_grad:
            cols = _im2col(xp, kh, kw, stride, ho, wo)
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel.accumulate_grad(gk.reshape(kernel.data.shape).astype(kernel.data.dtype))
        if x.requires_grad:
            gcols = np.matmul(w2.T[None], g2)
            g6 = gcols.reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
            if padding > 0:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(gxp)

    return Tensor.from_op(out, (x, kernel, bias), bwd, "conv2d")


# ---------------------------------------------------------------------------
# sampling & image-gradient ops
# ---------------------------------------------------------------------------


def grid_sample_bilinear(m: Tensor, coords: Tensor, mask_out_of_bounds: bool = True):
    """Bilinearly sample ``m`` (C x H x W) at pixel coords (2 x Hg x Wg: u, v).

    Returns (samples C x Hg x Wg, validity Hg x Wg). Out-of-bounds points give
    0 with validity false. Differentiable w.r.t. both the map and the coords.
    """
    if m.data.ndim != 3:
        raise ShapeError(f"grid_sample: map must be C x H x W, got {m.data.shape}")
    if coords.data.ndim != 3 or coords.data.shape[0] != 2:
        raise ShapeError(f"grid_sample: coords must be 2 x Hg x Wg, got {coords.data.shape}")
    c, h, w = m.data.shape
    hw = coords.data.shape[1:]
    u = coords.data[0].reshape(-1)
    v = coords.data[1].reshape(-1)
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(uc.astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(vc.astype(np.int64), 0, max(h - 2, 0))
    fu = (uc - u0).astype(m.data.dtype)
    fv = (vc - v0).astype(m.data.dtype)
    du = np.int64(w > 1)
    dv = np.int64(h > 1) * w

    m2 = m.data.reshape(c, h * w)
    n = u.size
    i00 = v0 * w + u0
    idx4 = np.empty(4 * n, dtype=np.int64)
    idx4[:n] = i00
    idx4[n : 2 * n] = i00 + du
    idx4[2 * n : 3 * n] = i00 + dv
    idx4[3 * n :] = i00 + dv + du
    m4 = np.take(m2, idx4, axis=1).reshape(c, 4, n)
    gu = 1.0 - fu
    gv = 1.0 - fv
    wts = np.empty((4, n), dtype=m.data.dtype)
    np.multiply(gu, gv, out=wts[0])
    np.multiply(fu, gv, out=wts[1])
    np.multiply(gu, fv, out=wts[2])
    np.multiply(fu, fv, out=wts[3])
    out = np.einsum("ckn,kn->cn", m4, wts)
    if mask_out_of_bounds:
        out *= valid
    out = out.reshape((c,) + hw)
    del m4  # recomputed in backward; dropping it keeps graphs small

    def bwd(g):
        gm = g.reshape(c, -1)
        if mask_out_of_bounds:
            gm = gm * valid
        if m.requires_grad:
            contrib = np.einsum("cn,kn->ckn", gm, wts).reshape(c, 4 * n)
            acc = np.empty((c, h * w), dtype=m.data.dtype)
            for ch in range(c):
                acc[ch] = np.bincount(idx4, weights=contrib[ch], minlength=h * w)
            m.accumulate_grad(acc.reshape(c, h, w))
        if coords.requires_grad:
            m4b = np.take(m.data.reshape(c, h * w), idx4, axis=1).reshape(c, 4, n)
            m00, m01, m10, m11 = m4b[:, 0], m4b[:, 1], m4b[:, 2], m4b[:, 3]
            cdu = (((m01 - m00) * gv + (m11 - m10) * fv) * gm).sum(axis=0)
            cdv = (((m10 - m00) * gu + (m11 - m01) * fu) * gm).sum(axis=0)
            gc = np.stack([cdu, cdv]).reshape((2,) + hw)
            coords.accumulate_grad(gc.astype(coords.data.dtype))

    out_t = Tensor.from_op(out, (m, coords), bwd, "grid_sample")
    return out_t, valid.reshape(hw)


def spatial_gradient(m: Tensor):
    """Per-pixel image gradient of a C x H x W map: central differences in the
    interior, one-sided at the borders. Returns (d/du, d/dv)."""
    if m.data.ndim != 3:
        raise ShapeError(f"spatial_gradient: map must be C x H x W, got {m.data.shape}")
    c, h, w = m.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"spatial_gradient: need H, W >= 2, got {m.data.shape}")
    d = m.data
    du = np.empty_like(d)
    du[:, :, 1:-1] = (d[:, :, 2:] - d[:, :, :-2]) * d.dtype.type(0.5)
    du[:, :, 0] = d[:, :, 1] - d[:, :, 0]
    du[:, :, -1] = d[:, :, -1] - d[:, :, -2]
    dv = np.empty_like(d)
    dv[:, 1:-1, :] = (d[:, 2:, :] - d[:, :-2, :]) * d.dtype.type(0.5)
    dv[:, 0, :] = d[:, 1, :] - d[:, 0, :]
    dv[:, -1, :] = d[:, -1, :] - d[:, -2, :]

    def bwd_u(g):
        gm = np.zeros_like(d)
        gm[:, :, 2:] += g[:, :, 1:-1] * d.dtype.type(0.5)
        gm[:, :, :-2] -= g[:, :, 1:-1] * d.dtype.type(0.5)
        gm[:, :, 1] += g[:, :, 0]
        gm[:, :, 0] -= g[:, :, 0]
        gm[:, :, -1] += g[:, :, -1]
        gm[:, :, -2] -= g[:, :, -1]
        m.accumulate_grad(gm)

    def bwd_v(g):
        gm = np.zeros_like(d)
        gm[:, 2:, :] += g[:, 1:-1, :] * d.dtype.type(0.5)
        gm[:, :-2, :] -= g[:, 1:-1, :] * d.dtype.type(0.5)
        gm[:, 1, :] += g[:, 0, :]
        gm[:, 0, :] -= g[:, 0, :]
        gm[:, -1, :] += g[:, -1, :]
        gm[:, -2, :] -= g[:, -1, :]
        m.accumulate_grad(gm)

    du_t = Tensor.from_op(du, (m,), bwd_u, "d/du")
    dv_t = Tensor.from_op(dv, (m,), bwd_v, "d/dv")
    return du_t, dv_t


# ---------------------------------------------------------------------------
# 3x3 linear solve, composed from differentiable scalar ops
# ---------------------------------------------------------------------------

_DET_FLOOR = 1e-12
_TIKHONOV = 1e-6
_SYM_TOL = 1e-5


def solve3_scalars(a00: Tensor, a01: Tensor, a02: Tensor, a11: Tensor, a12: Tensor,
                   a22: Tensor, b0: Tensor, b1: Tensor, b2: Tensor, amax: float) -> Tensor:
    """Adjugate/determinant solve of a symmetric 3x3 system given as scalar
    tensors; the differentiable core shared by solve3 and the LM step.

    Products feeding the determinant are reused in the adjugate. ``amax`` is
    the caller's max |A| for the singularity floor.
    """
    p1122 = mul(a11, a22)
    p1212 = mul(a12, a12)
    p0122 = mul(a01, a22)
    p1202 = mul(a12, a02)
    p0112 = mul(a01, a12)
    p1102 = mul(a11, a02)
    c00 = sub(p1122, p1212)
    c01 = sub(p1202, p0122)
    c02 = sub(p0112, p1102)
    det = add(add(mul(a00, c00), mul(a01, c01)), mul(a02, c02))

    if abs(det.item()) < _DET_FLOOR * amax or amax == 0.0:
        tr = add(add(a00, a11), a22)
        floor = scalar_mul(tr, _TIKHONOV / 3.0)
        a00 = add(a00, floor)
        a11 = add(a11, floor)
        a22 = add(a22, floor)
        p1122 = mul(a11, a22)
        c00 = sub(p1122, p1212)
        c01 = sub(p1202, mul(a01, a22))
        c02 = sub(p0112, mul(a11, a02))
        det = add(add(mul(a00, c00), mul(a01, c01)), mul(a02, c02))
        amax2 = max(amax, abs(a00.item()), abs(a11.item()), abs(a22.item()))
        if abs(det.item()) < _DET_FLOOR * amax2 or amax2 == 0.0:
            raise SingularSystem(
                f"solve3: determinant {det.item():.3e} below floor after regularization"
            )

    c11 = sub(mul(a00, a22), mul(a02, a02))
    c12 = sub(mul(a01, a02), mul(a00, a12))
    c22 = sub(mul(a00, a11), mul(a01, a01))

    x0 = div(add(add(mul(c00, b0), mul(c01, b1)), mul(c02, b2)), det)
    x1 = div(add(add(mul(c01, b0), mul(c11, b1)), mul(c12, b2)), det)
    x2 = div(add(add(mul(c02, b0), mul(c12, b1)), mul(c22, b2)), det)
    return stack_scalars([x0, x1, x2])


def solve3(a: Tensor, b: Tensor) -> Tensor:
    """Solve a 3x3 symmetric system via adjugate/determinant scalar ops.

    The matrix is symmetrized (A + A^T)/2 after asserting near-symmetry. If the
    determinant falls under 1e-12 * max|A|, a one-shot Tikhonov floor
    (1e-6 * trace/3 on the diagonal) is applied; if the system is still
    singular, SingularSystem is raised.
    """
    if a.data.shape != (3, 3):
        raise ShapeError(f"solve3: A must be 3x3, got {a.data.shape}")
    if b.data.shape != (3,):
        raise ShapeError(f"solve3: b must have shape (3,), got {b.data.shape}")
    amax = float(np.max(np.abs(a.data)))
    asym = float(np.max(np.abs(a.data - a.data.T)))
    if asym > _SYM_TOL * max(1.0, amax):
        raise ShapeError(f"solve3: matrix is not symmetric (max asymmetry {asym:.3e})")

    e = [gather_scalar(a, i) for i in range(9)]
    a00, a11, a22 = e[0], e[4], e[8]
    a01 = scalar_mul(add(e[1], e[3]), 0.5)
    a02 = scalar_mul(add(e[2], e[6]), 0.5)
    a12 = scalar_mul(add(e[5], e[7]), 0.5)
    b0, b1, b2 = (gather_scalar(b, i) for i in range(3))
    return solve3_scalars(a00, a01, a02, a11, a12, a22, b0, b1, b2, amax)


# ---------------------------------------------------------------------------
# tensor file format ("CVGT": magic, version, dtype, u16 ndim, u32 dims, f32 payload)
# ---------------------------------------------------------------------------

_MAGIC = b"CVGT"
_FORMAT_VERSION = 1
_DTYPE_F32 = 1


def tensor_to_bytes(arr) -> bytes:
    """Serialize an array (or Tensor) to the CVGT wire/file format."""
    data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    data = np.asarray(data, dtype="<f4")
    dims = data.shape
    header = _MAGIC + bytes([_FORMAT_VERSION, _DTYPE_F32]) + struct.pack("<H", len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
    return header + data.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != _MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {_MAGIC!r}")
    version, dtype_code = buf[4], buf[5]
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    if dtype_code != _DTYPE_F32:
        raise ValueError(f"unsupported dtype code {dtype_code}")
    (ndim,) = struct.unpack_from("<H", buf, 6)
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    off = 8 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.reshape(dims).copy()


def header_nbytes(ndim: int) -> int:
    """Size of the CVGT header for a given rank (manifest-overhead accounting)."""
    return 8 + 4 * ndim


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
