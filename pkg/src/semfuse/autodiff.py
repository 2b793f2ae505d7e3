"""Dense float64 tensors with reverse-mode differentiation.

Covers exactly what the fusion pipeline needs: broadcasting elementwise
arithmetic, 2-d matmul, strided conv2d, row softmax, a Sobel filter and
the usual pointwise nonlinearities. Every operation records its inputs
and a hand-written backward rule; ``backward`` replays the records in
reverse topological order. The rules are verified against central finite
differences in the test suite.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

Array = np.ndarray


def _check_finite(arr: Array, label: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {label}")


class Tensor:
    """N-d float64 array with an optional gradient buffer.

    Operation outputs keep references to their inputs plus a closure
    computing input gradients from the output gradient. Gradients
    accumulate across ``backward`` calls until ``zero_grad``. Creating a
    tensor with NaN or Inf anywhere raises ``NonFiniteError``; finiteness
    is a contract of the whole graph, not a soft warning.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), name=self.name)

    def backward(self, grad: Array | None = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar. All routes through the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return powi(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: Array, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    # Graph edges are only kept when some input needs them; otherwise the
    # result is a plain constant and the closure is dropped immediately.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def trace(root: Tensor) -> list[Tensor]:
    """Nodes below `root` in topological order (inputs before consumers)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: Array | None = None) -> None:
    """Accumulate d(root)/d(node) into `.grad` for every requires_grad leaf.

    `root` must be a single element. Repeated calls keep adding into the
    same buffers; call ``zero_grad`` on the leaves to reset between steps.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.data.shape}")
    seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    flow: dict[int, Array] = {id(root): seed}
    for node in reversed(trace(root)):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = flow.get(id(parent))
            flow[id(parent)] = pg if held is None else held + pg
    # Anything left in `flow` is unreachable from the leaves; nothing to do.


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(out, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _from_op(out, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def powi(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op(out, (a,), back)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _from_op(out, (a,), lambda g: (g / (2.0 * out),))


def absval(a) -> Tensor:
    a = _as_tensor(a)
    return _from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)

    def back(g):
        return (g * (a.data > floor),)

    return _from_op(out, (a,), back)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1.0 - out),)

    return _from_op(out, (a,), back)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data >= 0
    out = np.where(mask, a.data, slope * a.data)

    def back(g):
        return (g * np.where(mask, 1.0, slope),)

    return _from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def back(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _from_op(out, (a,), back)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def back(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _from_op(out, (a,), back)


def dot(a, b) -> Tensor:
    """Scalar product of two same-shape tensors."""
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.data.shape),)

    return _from_op(out, (a,), back)


def flatten(a) -> Tensor:
    a = _as_tensor(a)
    return reshape(a, (a.data.size,))


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a 2-d tensor, got shape {a.data.shape}")
    return _from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty sequence")
    out = np.concatenate([p.data for p in parts], axis=axis)
    splits = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _from_op(out, tuple(parts), back)


def rows(a, start: int, stop: int) -> Tensor:
    """Contiguous row slice of a 2-d tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"rows needs a 2-d tensor, got shape {a.data.shape}")
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {a.data.shape}")
    out = a.data[start:stop].copy()

    def back(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _from_op(out, (a,), back)


def crop2d(a, height: int, width: int) -> Tensor:
    """Keep the top-left height x width window of a (C, H, W) tensor."""
    a = _as_tensor(a)
    c, h, w = a.data.shape
    if height > h or width > w:
        raise ShapeError(f"crop to {height}x{width} exceeds input {h}x{w}")
    out = a.data[:, :height, :width].copy()

    def back(g):
        full = np.zeros_like(a.data)
        full[:, :height, :width] = g
        return (full,)

    return _from_op(out, (a,), back)


def upsample_nearest2(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (C, H, W) tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"upsample_nearest2 needs (C, H, W), got shape {a.data.shape}")
    out = a.data.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = a.data.shape

    def back(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _from_op(out, (a,), back)


def pad_replicate(a, pad: int = 1) -> Tensor:
    """Edge-replicating spatial padding of a (C, H, W) tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError(f"pad_replicate needs (C, H, W), got shape {a.data.shape}")
    c, h, w = a.data.shape
    ih = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    iw = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = a.data[:, ih[:, None], iw[None, :]]

    def back(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (np.arange(c)[:, None, None], ih[None, :, None], iw[None, None, :]), g)
        return (gx,)

    return _from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(out, (a, b), back)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-d tensor, computed with max-shifted exponents."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-d tensor, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - inner) * out,)

    return _from_op(out, (a,), back)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: Array, k: int, stride: int, ho: int, wo: int) -> Array:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]
    return np.ascontiguousarray(
        win.transpose(0, 3, 4, 1, 2).reshape(xp.shape[0] * k * k, ho * wo))


def _col2im(gcols: Array, c: int, hp: int, wp: int, k: int, stride: int,
            ho: int, wo: int) -> Array:
    g = gcols.reshape(c, k, k, ho, wo)
    gx = np.zeros((c, hp, wp))
    for di in range(k):
        for dj in range(k):
            gx[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += g[:, di, dj]
    return gx


def conv2d(x, w, padding: int = 0, stride: int = 1) -> Tensor:
    """2-d cross-correlation of (C_in, H, W) with (C_out, C_in, k, k).

    Zero padding; output side is (H + 2*padding - k) // stride + 1. The
    kernel must be square with odd side.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs (C,H,W) x (O,C,k,k), got {x.data.shape} and {w.data.shape}")
    cin, h, wd = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd side, got {w.data.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {w.data.shape}")
    if padding < 0 or stride < 1:
        raise ContractError(f"conv2d invalid padding={padding} stride={stride}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.data.shape}, "
                         f"kernel {w.data.shape}, padding {padding}, stride {stride}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(cout, cin * k * k)
    out = (w2 @ cols).reshape(cout, ho, wo)
    hp, wp = xp.shape[1], xp.shape[2]

    def back(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols.T).reshape(w.data.shape)
        gxp = _col2im(w2.T @ g2, cin, hp, wp, k, stride, ho, wo)
        gx = gxp[:, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw

    return _from_op(out, (x, w), back)


def _sobel_core(xp: Tensor, h: int, w: int) -> Tensor:
    # Separable form with the neighbour difference taken first. Equal
    # neighbours cancel exactly, so constants map to exact zeros instead
    # of accumulating BLAS rounding residue.
    p = xp.data[0]
    dxh = p[:, 2:] - p[:, :-2]
    gx = dxh[:-2] + 2.0 * dxh[1:-1] + dxh[2:]
    dyv = p[2:, :] - p[:-2, :]
    gy = dyv[:, :-2] + 2.0 * dyv[:, 1:-1] + dyv[:, 2:]
    out = np.stack([gx, gy])

    def back(g):
        g0, g1 = g[0], g[1]
        gdxh = np.zeros((h + 2, w))
        gdxh[:-2] += g0
        gdxh[1:-1] += 2.0 * g0
        gdxh[2:] += g0
        gp = np.zeros((h + 2, w + 2))
        gp[:, 2:] += gdxh
        gp[:, :-2] -= gdxh
        gdyv = np.zeros((h, w + 2))
        gdyv[:, :-2] += g1
        gdyv[:, 1:-1] += 2.0 * g1
        gdyv[:, 2:] += g1
        gp[2:, :] += gdyv
        gp[:-2, :] -= gdyv
        return (gp[None],)

    return _from_op(out, (xp,), back)


def sobel(x) -> Tensor:
    """Two-channel Sobel response of a (1, H, W) tensor with replicate padding.

    Channel 0 responds to horizontal intensity change (vertical edges),
    channel 1 to vertical change; cross-correlation convention.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3 or x.data.shape[0] != 1:
        raise ShapeError(f"sobel needs a (1, H, W) tensor, got shape {x.data.shape}")
    if x.data.shape[1] < 3 or x.data.shape[2] < 3:
        raise ShapeError(f"sobel needs at least 3x3 input, got shape {x.data.shape}")
    return _sobel_core(pad_replicate(x, 1), x.data.shape[1], x.data.shape[2])
