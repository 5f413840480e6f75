"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is implicit: each op links its output to its parents and a
backward closure. Calling ``backward()`` on a scalar walks the graph in
reverse topological order, accumulates gradients into ``.grad`` buffers,
and then discards the tape. Everything is float64; broadcasting follows
numpy's trailing-dimension rules and nothing more.

Gradient conventions that matter for callers:
  * max-reductions route gradient to the first argmax index under ties;
  * leaky_relu uses the negative-side slope at exactly zero;
  * abs and sqrt use subgradient 0 at zero (sqrt only via norms that
    mask zero-length inputs upstream).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError

_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check run after every forward op (slow; for tests)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __pow__(self, p):
        return powi(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return max_(self, axis=axis, keepdims=keepdims)

    # -- autodiff ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; frees the tape afterwards."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # the tape lives for exactly one backward pass
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values produced by a tensor op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g back down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise binary ops ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


# -- elementwise unary ops ------------------------------------------------


def neg(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, -g)

    return _node(-x.data, (x,), bw)


def powi(x: Tensor, p: float) -> Tensor:
    p = float(p)

    def bw(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _node(x.data**p, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw(g):
        _accum(x, g * out_data)

    return _node(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g / x.data)

    return _node(np.log(x.data), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bw(g):
        denom = np.where(out_data > 0.0, 2.0 * out_data, np.inf)
        _accum(x, g / denom)

    return _node(out_data, (x,), bw)


def absv(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _node(np.abs(x.data), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for overflow-free evaluation
    out_data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def bw(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ShapeError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0.0, 1.0, slope)

    def bw(g):
        _accum(x, g * factor)

    return _node(np.where(x.data > 0.0, x.data, slope * x.data), (x,), bw)


# -- reductions -----------------------------------------------------------


def _restore_axes(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if keepdims or axis is None:
        return np.broadcast_to(g.reshape(g.shape if keepdims else (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    expanded = g
    for a in sorted(axes):
        expanded = np.expand_dims(expanded, a)
    return np.broadcast_to(expanded, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        _accum(x, _restore_axes(g, x.shape, axis, keepdims).copy())

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod(
        [x.shape[a % x.ndim] for a in ((axis,) if isinstance(axis, int) else axis)]
    )

    def bw(g):
        _accum(x, _restore_axes(g, x.shape, axis, keepdims) / float(count))

    return _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bw)


def max_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; gradient goes to the first argmax only (ties)."""
    out_data = x.data.max(axis=axis, keepdims=keepdims)

    def bw(g):
        gx = np.zeros_like(x.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(x.data), x.shape)
            gx[idx] = float(np.sum(g))
        else:
            am = np.argmax(x.data, axis=axis)
            lane = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, np.expand_dims(am, axis), lane, axis=axis)
        _accum(x, gx)

    return _node(out_data, (x,), bw)


# -- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inverse))

    return _node(np.transpose(x.data, axes), (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out_data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None

    def bw(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _node(out_data.copy(), (x,), bw)


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def gather(x: Tensor, indices) -> Tensor:
    """Select rows of x (axis 0) by an integer index list; repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather expects a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather index out of range for axis of length {x.shape[0]}")

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(x, gx)

    return _node(x.data[idx], (x,), bw)


# -- structured ops for image/graph stacks ----------------------------------


def pad2d(x: Tensor, ph: int, pw: int, vertical: str = "zero") -> Tensor:
    """Pad a (C, H, W) map: circular (wrap) columns, zero or edge rows."""
    if x.ndim != 3:
        raise ShapeError(f"pad2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if pw > w:
        raise ShapeError(f"horizontal pad {pw} exceeds width {w}")
    if vertical not in ("zero", "edge"):
        raise ShapeError(f"unknown vertical pad mode {vertical!r}")

    wrapped = np.concatenate([x.data[:, :, w - pw:], x.data, x.data[:, :, :pw]], axis=2) if pw else x.data
    mode = "constant" if vertical == "zero" else "edge"
    out_data = np.pad(wrapped, ((0, 0), (ph, ph), (0, 0)), mode=mode) if ph else wrapped.copy()

    def bw(g):
        gm = g[:, ph:ph + h, :]
        if ph and vertical == "edge":
            gm = gm.copy()
            gm[:, 0, :] += g[:, :ph, :].sum(axis=1)
            gm[:, -1, :] += g[:, ph + h:, :].sum(axis=1)
        gx = gm[:, :, pw:pw + w].copy()
        if pw:
            gx[:, :, w - pw:] += gm[:, :, :pw]
            gx[:, :, :pw] += gm[:, :, pw + w:]
        _accum(x, gx)

    return _node(out_data, (x,), bw)


def _im2col(data: np.ndarray, kh: int, kw: int) -> tuple[np.ndarray, int, int]:
    """(C, H, W) -> ((H'*W', C*kh*kw) patch matrix, H', W')."""
    win = np.lib.stride_tricks.sliding_window_view(data, (kh, kw), axis=(1, 2))
    hp, wp = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(hp * wp, -1)
    return cols, hp, wp


def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """Valid (no padding, stride 1) 2-D correlation: (Cin,H,W) x (Cout,Cin,kh,kw)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (Cin,H,W) and (Cout,Cin,kh,kw), got {x.shape}, {weight.shape}")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")

    # im2col + matmul rather than einsum: every output pixel is then the
    # same fixed-order dot product whatever its position, which keeps the
    # forward pass bit-exactly equivariant under circular column shifts
    # (einsum's optimized paths block partial sums by output position)
    cols, hp, wp = _im2col(x.data, kh, kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out_data = np.ascontiguousarray((cols @ wmat.T).T).reshape(cout, hp, wp)

    def bw(g):
        gmat = g.reshape(cout, hp * wp)
        _accum(weight, (gmat @ cols).reshape(cout, cin, kh, kw))
        gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols, _, _ = _im2col(gp, kh, kw)
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        fmat = np.ascontiguousarray(flipped).reshape(cin, cout * kh * kw)
        _accum(x, np.ascontiguousarray((gcols @ fmat.T).T).reshape(cin, h, w))

    return _node(out_data, (x, weight), bw)


def upsample2d(x: Tensor, sv: int, sh: int) -> Tensor:
    """Nearest-neighbor upsampling of a (C, H, W) map by (sv, sh)."""
    if x.ndim != 3:
        raise ShapeError(f"upsample2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape

    def bw(g):
        _accum(x, g.reshape(c, h, sv, w, sh).sum(axis=(2, 4)))

    return _node(np.repeat(np.repeat(x.data, sv, axis=1), sh, axis=2), (x,), bw)


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling of a (C, H, W) map; H and W must be even."""
    if x.ndim != 3:
        raise ShapeError(f"avgpool2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2d needs even dims, got {h}x{w}")

    def bw(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0)

    return _node(x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)), (x,), bw)
