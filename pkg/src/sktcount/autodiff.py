"""Minimal reverse-mode automatic differentiation on top of numpy.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure computing the parents' gradient contributions.  Nodes
are stamped with a monotonically increasing sequence number at creation, so
the creation order is a valid topological order of the graph.  ``backward``
collects the nodes reachable from the loss and replays them in strictly
decreasing sequence order, which makes gradient accumulation order (and hence
the float result) deterministic.

Only the operations needed by the crowd-counting networks and the transfer
losses are provided.  Broadcasting is limited to the per-channel bias add
inside :func:`conv2d`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "conv2d",
    "conv2d_reference",
    "same_padding",
    "maxpool2d",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "sum",
    "mean",
    "div",
    "sqrt",
    "l2norm",
    "clamp_min",
    "matmul",
    "reshape",
    "transpose",
    "backward",
    "zero_grad",
    "grad_check",
]

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the offending dimension."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for frozen teachers)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with an optional gradient slot.

    ``data`` is never mutated by operations; only ``grad`` changes (and the
    optimizer replaces ``data`` wholesale on parameter leaves).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        for dim, (x, y) in enumerate(itertools.zip_longest(a.shape, b.shape)):
            if x != y:
                raise ShapeError(f"{op}: shape mismatch at dim {dim} ({x} vs {y}); shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2 * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN, so divergence upstream still reaches the loss
    return _make(np.maximum(a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(np.mean(a.data), dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; gradient passes where ``a > floor``."""
    mask = a.data > floor
    return _make(np.where(mask, a.data, a.dtype.type(floor)), (a,), lambda g: (g * mask,))


def l2norm(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g * a.data / safe, 0).astype(a.dtype),)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.data.ndim < 2 or a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul operands must share batch dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimension mismatch ({a.shape[-1]} vs {b.shape[-2]})")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose expects at least 2 dims, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- convolution


def _out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None, stride, padding, dilation):
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be N×C×H×W, got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be C_out×C_in×K×K, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels (dim 1) {x.shape[1]} != weight C_in {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape[2]}×{w.shape[3]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias must have shape ({w.shape[0]},), got {b.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid conv2d geometry stride={stride} padding={padding} dilation={dilation}")
    k = w.shape[2]
    ho = _out_size(x.shape[2], k, stride, padding, dilation)
    wo = _out_size(x.shape[3], k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: receptive field larger than padded input {x.shape[2:]}")
    return k, ho, wo


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that keeps H and W unchanged at stride 1; requires an odd kernel."""
    if kernel % 2 == 0:
        raise ValueError(f"'same' padding needs an odd kernel size, got {kernel}")
    return dilation * (kernel - 1) // 2


def _windows(xp: np.ndarray, k: int, ho: int, wo: int, stride: int, dilation: int) -> np.ndarray:
    # View of shape (N, C, K, K, Ho, Wo) over the padded input, no copy.
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    method: str = "im2col",
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``method="im2col"`` lowers the convolution to one matrix product;
    ``method="direct"`` accumulates one channel-mixing product per kernel tap.
    Both share the same backward rule.
    """
    k, ho, wo = _check_conv(x, w, b, stride, padding, dilation)
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _windows(xp, k, ho, wo, stride, dilation)

    if method == "im2col":
        cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(cin * k * k, n * ho * wo)
        out = (w.data.reshape(cout, -1) @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    elif method == "direct":
        cols = None
        out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += np.einsum("nchw,oc->nohw", win[:, :, i, j], w.data[:, :, i, j], optimize=True)
    else:
        raise ValueError(f"unknown conv2d method {method!r}")
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def bw(g):
        g_mat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if w.requires_grad:
            c = cols
            if c is None:
                c = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(cin * k * k, -1)
            gw = (g_mat @ c.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = (w.data.reshape(cout, -1).T @ g_mat).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += (
                        gcols[:, i, j].transpose(1, 0, 2, 3)
                    )
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b=None, stride=1, padding=0, dilation=1) -> np.ndarray:
    """Plain nested-loop cross-correlation used as an independent oracle."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(wd, k, stride, padding, dilation)
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for bi in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cin):
                        for i in range(k):
                            for j in range(k):
                                rr = r * stride - padding + i * dilation
                                cc = c * stride - padding + j * dilation
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += float(x[bi, ci, rr, cc]) * float(w[o, ci, i, j])
                    out[bi, o, r, c] = acc
    return out


# ---------------------------------------------------------------- pooling


def maxpool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling; ``kernel``/``stride`` may be an int or a (kh, kw) pair.

    Backward routes each window's gradient to its first (row-major) maximum.
    """
    kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
    if stride is None:
        stride = (kh, kw)
    sh, sw = (stride, stride) if np.isscalar(stride) else stride
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be N×C×H×W, got {x.shape}")
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"maxpool2d: kernel {kh}×{kw} larger than input {h}×{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    s = x.data.strides
    win = as_strided(
        x.data,
        shape=(n, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * sh, s[3] * sw, s[2], s[3]),
        writeable=False,
    ).reshape(n, c, ho, wo, kh * kw)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(idx, kw)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * sh + di
        cols = np.arange(wo).reshape(1, 1, 1, wo) * sw + dj
        nn = np.arange(n).reshape(n, 1, 1, 1)
        cc = np.arange(c).reshape(1, c, 1, 1)
        if kh <= sh and kw <= sw:
            gx[nn, cc, rows, cols] = g  # windows are disjoint
        else:
            np.add.at(gx, (nn, cc, rows, cols), g)
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------------- backward


def _topo(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Gradients accumulate across calls; use :func:`zero_grad` to reset.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in _topo(loss):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check


def grad_check(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = 20,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences.

    ``build`` must recompute the scalar loss from the current ``params`` data
    (64-bit).  Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
    zero_grad(params)
    backward(build())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = build().item()
            flat[i] = orig - epsilon
            fm = build().item()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    zero_grad(params)
    return worst
