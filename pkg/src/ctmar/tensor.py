"""Dense f32/f64 tensors with reverse-mode automatic differentiation.

The operator set is deliberately small: exactly what a convolutional
channel-attention U-Net needs, plus a finite-difference oracle to check
the analytic gradients against. Every op is numpy-backed and
deterministic; the recorded tape (parent links plus a backward closure
on each result tensor) is consumed by a single ``backward()`` call.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

DTYPES = {"f32": np.float32, "f64": np.float64}
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


class GraphError(RuntimeError):
    """Raised when a backward tape is misused (non-scalar root, reuse)."""


def _as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """A dense real array with an optional gradient buffer.

    ``data`` is always a C-contiguous float32 or float64 ndarray. When
    ``requires_grad`` is set (directly, or inherited from any input of
    an op), the op records itself on the result so that ``backward()``
    can later fill ``grad`` on every reachable leaf.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is None:
            dt = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
        else:
            dt = _as_dtype(dtype)
        self.data = np.ascontiguousarray(arr, dtype=dt)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype_name(self) -> str:
        return "f32" if self.data.dtype == np.float32 else "f64"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name}{grad})"

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff engine -----------------------------------------------------

    def _record(self, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        if any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward_fn = backward_fn
        return self

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape.

        Gradients accumulate additively into ``grad`` on every tensor
        with ``requires_grad``. The tape rooted here is released
        afterwards; a second call is an error.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("backward() called twice on the same graph")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad")

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
            for p in node._parents:
                if p._backward_fn is not None and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # leaf: accumulate into the tensor's gradient buffer
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward_fn is None:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
                else:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
            node._backward_fn = None
            node._parents = ()
        self._consumed = True

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swap_last_two(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out._record((a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return out._record((a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return out._record((a, b), bw)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return out._record((a,), lambda g: (-g,))


def texp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return out._record((a,), lambda g: (g * out.data,))


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient uses sign(0) = 0."""
    out = Tensor(np.abs(a.data))
    return out._record((a,), lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))
    return out._record((a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.data.dtype))
    return out._record((a,), lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.data.dtype),))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(x.dtype, copy=False))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return out._record((a,), bw)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return out._record((a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return out._record((a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_same_dtype(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return out._record(tuple(tensors), bw)


# -- softmax / normalization ---------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (per-slice max subtraction)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return out._record((a,), bw)


def layernorm_channels(a: Tensor, gamma: Tensor, beta: Optional[Tensor] = None,
                       eps: float = 1e-6) -> Tensor:
    """Standardize the channel vector at every spatial location.

    ``a`` is (C,H,W) or (N,C,H,W); ``gamma`` (and optional ``beta``)
    are per-channel (C,).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if a.ndim not in (3, 4):
        raise ShapeError(f"layernorm_channels expects (C,H,W) or (N,C,H,W), got {a.shape}")
    ch_axis = a.ndim - 3
    c = a.shape[ch_axis]
    if gamma.shape != (c,):
        raise ShapeError(f"gamma shape {gamma.shape} does not match {c} channels")
    if beta is not None and beta.shape != (c,):
        raise ShapeError(f"beta shape {beta.shape} does not match {c} channels")
    _check_same_dtype(a, gamma, *([beta] if beta is not None else []))

    x = a.data
    expand = (slice(None), None, None)  # (C,) -> (C,1,1), broadcasts for 3-D and 4-D
    mu = x.mean(axis=ch_axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=ch_axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data[expand]
    if beta is not None:
        y = y + beta.data[expand]
    out = Tensor(y.astype(x.dtype, copy=False))

    reduce_axes = tuple(i for i in range(a.ndim) if i != ch_axis)

    def bw(g):
        dxhat = g * gamma.data[expand]
        m1 = dxhat.mean(axis=ch_axis, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=ch_axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes) if beta is not None else None
        if beta is not None:
            return dx, dgamma, dbeta
        return dx, dgamma

    parents = (a, gamma) if beta is None else (a, gamma, beta)
    return out._record(parents, bw)


# -- matmul -------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``.

    Leading batch extents must agree (or be absent on one side).
    """
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    for da, db in zip(reversed(a.shape[:-2]), reversed(b.shape[:-2])):
        if da != db:
            raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out._record((a, b), bw)


# -- pixel shuffle ------------------------------------------------------------


def _split_batch(shape: tuple, want: int) -> bool:
    """True if the input carries a leading batch axis (rank want+1)."""
    if len(shape) == want:
        return False
    if len(shape) == want + 1:
        return True
    raise ShapeError(f"expected rank {want} or {want + 1}, got shape {shape}")


def pixel_unshuffle(a: Tensor, r: int) -> Tensor:
    """(C,H,W) -> (C*r*r, H/r, W/r); block (dy,dx) lands at channel c*r*r + dy*r + dx."""
    if r < 1:
        raise ValueError("r must be >= 1")
    _split_batch(a.shape, 3)
    c, h, w = a.shape[-3:]
    if h % r or w % r:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by r={r}")
    lead = a.shape[:-3]
    x = a.data.reshape(lead + (c, h // r, r, w // r, r))
    n = len(lead)
    perm = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
    y = x.transpose(perm).reshape(lead + (c * r * r, h // r, w // r))
    out = Tensor(np.ascontiguousarray(y))

    def bw(g):
        gg = g.reshape(lead + (c, r, r, h // r, w // r))
        inv = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
        return (np.ascontiguousarray(gg.transpose(inv).reshape(a.shape)),)

    return out._record((a,), bw)


def pixel_shuffle(a: Tensor, r: int) -> Tensor:
    """(C,H,W) -> (C/r^2, H*r, W*r); exact inverse of pixel_unshuffle."""
    if r < 1:
        raise ValueError("r must be >= 1")
    _split_batch(a.shape, 3)
    c, h, w = a.shape[-3:]
    if c % (r * r):
        raise ShapeError(f"channel extent {c} not divisible by r^2={r * r}")
    lead = a.shape[:-3]
    n = len(lead)
    x = a.data.reshape(lead + (c // (r * r), r, r, h, w))
    perm = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    y = x.transpose(perm).reshape(lead + (c // (r * r), h * r, w * r))
    out = Tensor(np.ascontiguousarray(y))

    def bw(g):
        gg = g.reshape(lead + (c // (r * r), h, r, w, r))
        inv = tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3)
        return (np.ascontiguousarray(gg.transpose(inv).reshape(a.shape)),)

    return out._record((a,), bw)


# -- convolution ----------------------------------------------------------------


def _conv_out_extent(h: int, k: int, stride: int, padding: int) -> int:
    out = (h + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution over extent {h} with k={k}, stride={stride}, "
                         f"padding={padding} yields empty output")
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) with square odd kernels.

    ``x`` is (C_in,H,W) or (N,C_in,H,W); ``weight`` is
    (C_out, C_in/groups, k, k). Depth-wise means
    groups == C_in == C_out. Partial sums accumulate in f64.
    """
    _check_same_dtype(x, weight, *([bias] if bias is not None else []))
    batched = _split_batch(x.shape, 3)
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    if weight.ndim != 4 or weight.shape[-1] != weight.shape[-2]:
        raise ShapeError(f"weight must be (C_out, C_in/groups, k, k), got {weight.shape}")
    c_out, c_in_g, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("stride >= 1, padding >= 0, groups >= 1 required")
    if c_in % groups or c_out % groups:
        raise ShapeError(f"groups={groups} does not divide channels {c_in}->{c_out}")
    if c_in_g != c_in // groups:
        raise ShapeError(f"weight expects {c_in_g * groups} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")

    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(w, k, stride, padding)
    dt = x.data.dtype

    if padding:
        xp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=dt)
        xp[:, :, padding:padding + h, padding:padding + w] = xd
    else:
        xp = xd

    depthwise = groups == c_in == c_out
    acc = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    wd = weight.data
    for di in range(k):
        for dj in range(k):
            xs = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
            if depthwise:
                acc += xs * wd[:, 0, di, dj][None, :, None, None]
            elif groups == 1:
                acc += np.matmul(wd[:, :, di, dj],
                                 xs.reshape(n, c_in, ho * wo)).reshape(n, c_out, ho, wo)
            else:
                xg = xs.reshape(n, groups, c_in_g, ho * wo)
                wg = wd.reshape(groups, c_out // groups, c_in_g, k, k)[:, :, :, di, dj]
                acc += np.matmul(wg, xg).reshape(n, c_out, ho, wo)
    if bias is not None:
        acc += bias.data.astype(np.float64)[None, :, None, None]
    out_data = acc.astype(dt, copy=False)
    out = Tensor(out_data if batched else out_data[0])

    def bw(g):
        gd = g if batched else g[None]
        gxp = np.zeros(xp.shape, dtype=np.float64)
        gw = np.zeros(wd.shape, dtype=np.float64)
        for di in range(k):
            for dj in range(k):
                xs = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
                target = gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
                if depthwise:
                    gw[:, 0, di, dj] = np.einsum("nchw,nchw->c", gd, xs)
                    target += gd * wd[:, 0, di, dj][None, :, None, None]
                elif groups == 1:
                    gr = gd.reshape(n, c_out, ho * wo)
                    xr = xs.reshape(n, c_in, ho * wo)
                    gw[:, :, di, dj] = np.matmul(gr, xr.transpose(0, 2, 1)).sum(axis=0)
                    target += np.matmul(wd[:, :, di, dj].T, gr).reshape(n, c_in, ho, wo)
                else:
                    gr = gd.reshape(n, groups, c_out // groups, ho * wo)
                    xr = xs.reshape(n, groups, c_in_g, ho * wo)
                    gw.reshape(groups, c_out // groups, c_in_g, k, k)[:, :, :, di, dj] = \
                        np.matmul(gr, xr.transpose(0, 1, 3, 2)).sum(axis=0)
                    wg = wd.reshape(groups, c_out // groups, c_in_g, k, k)[:, :, :, di, dj]
                    target += np.matmul(np.swapaxes(wg, -1, -2), gr).reshape(n, c_in, ho, wo)
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        gx = gx.astype(dt, copy=False)
        if not batched:
            gx = gx[0]
        grads = [gx, gw.astype(dt, copy=False)]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)).astype(dt, copy=False))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return out._record(parents, bw)


# -- gradient oracle -------------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a tensor-to-scalar function.

    ``f`` must be deterministic; it receives a detached copy of ``x``
    with one element perturbed by +/- h at a time.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    def evaluate(arr: np.ndarray) -> float:
        r = f(Tensor(arr))
        return r.item() if isinstance(r, Tensor) else float(r)

    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
