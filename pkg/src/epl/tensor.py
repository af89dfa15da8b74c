"""Dense real arrays with a minimal define-by-run reverse-mode autodiff graph.

Values live in numpy arrays (row-major, volumes channels-first). Every op
that touches a tensor requiring gradients records its parents and an adjoint
closure; :func:`backward` walks that graph once in reverse topological order
and then discards it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptyReductionError, NumericError, ShapeError

EPS = 1e-8

_state = {"dtype": np.dtype(np.float64), "grad": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "const"
        return t

    # array-like surface -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype != _state["dtype"]:
        arr = arr.astype(_state["dtype"])
    return Tensor._wrap(arr)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw, "mul")


def _guard_denominator(d: np.ndarray) -> np.ndarray:
    # sign-preserving clamp of |d| to >= EPS; zero maps to +EPS
    small = np.abs(d) < EPS
    if not small.any():
        return d
    return np.where(small, np.where(d < 0, -EPS, EPS).astype(d.dtype), d)


def div(a, b) -> Tensor:
    """Elementwise ``a / b`` with the denominator kept at least EPS away from 0."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    den = _guard_denominator(b.data)
    out = a.data / den
    if not np.all(np.isfinite(out)):
        raise NumericError("division produced non-finite values")
    clamped = den is not b.data

    def bw(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gd = -g * out / den
            if clamped:
                gd = np.where(np.abs(b.data) < EPS, np.zeros((), gd.dtype), gd)
            gb = _unbroadcast(gd, b.shape)
        return ga, gb

    return _record(out, (a, b), bw, "div")


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log of ``max(a, EPS)``; no gradient flows through the clamp."""
    a = as_tensor(a)
    x = np.maximum(a.data, EPS)

    def bw(g):
        return (np.where(a.data >= EPS, g / x, np.zeros((), g.dtype)),)

    return _record(np.log(x), (a,), bw, "log")


def log2(a) -> Tensor:
    a = as_tensor(a)
    x = np.maximum(a.data, EPS)

    def bw(g):
        return (np.where(a.data >= EPS, g / (x * np.log(2.0)), np.zeros((), g.dtype)),)

    return _record(np.log2(x), (a,), bw, "log2")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)

    def bw(g):
        return (g * (0.5 * (1.0 + np.tanh(0.5 * x))),)  # overflow-free sigmoid

    return _record(out, (a,), bw, "softplus")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(out, (a,), bw, "power")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= lo
    return _record(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def sqrt(a) -> Tensor:
    return power(a, 0.5)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
    "log2": log2, "relu": relu, "softplus": softplus, "negate": negate,
    "power": power,
}


def elementwise(kind: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


# reductions -----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if a.size == 0 or any(a.shape[ax] == 0 for ax in axes):
        raise EmptyReductionError(f"{kind} over an empty axis of shape {a.shape}")
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), a.shape),)

    elif kind == "mean":
        count = int(np.prod([a.shape[ax] for ax in axes]))
        out = a.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, a.shape),)

    elif kind == "max":
        full = a.data.max(axis=axes, keepdims=True)
        out = full if keepdims else full.reshape([s for i, s in enumerate(a.shape) if i not in axes])

        def bw(g):
            mask = a.data == full
            share = mask / mask.sum(axis=axes, keepdims=True)
            return (share * g.reshape(kept_shape),)

    elif kind == "argmax":
        if len(axes) != 1:
            raise ValueError("argmax reduces exactly one axis")
        idx = np.argmax(a.data, axis=axes[0], keepdims=keepdims)
        return Tensor(idx, dtype=np.int64)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _record(np.asarray(out), (a,), bw, kind)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return reduce("sum", a, axis, keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


# structural -----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot matmul {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw, "matmul")



def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.asarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(out, ts, bw, "stack")


# volumetric -----------------------------------------------------------------


# convs with at least this many input channels use the shifted-GEMM path
SHIFT_MIN_CHANNELS = 4


def _conv_shift(xd, wk5, p, s):
    """Conv as one small GEMM per kernel offset, with no im2col buffer.

    The padded input is split into s^3 stride phases, each stored channels-last
    and flattened, so every kernel tap is a contiguous row shift inside one
    phase. Outputs are computed on the whole phase grid and cropped; rows past
    the crop are junk and get zero gradient.
    """
    B, C, D, H, W = xd.shape
    O, k = wk5.shape[0], wk5.shape[2]
    Dp, Hp, Wp = D + 2 * p, H + 2 * p, W + 2 * p
    Do, Ho, Wo = (Dp - k) // s + 1, (Hp - k) // s + 1, (Wp - k) // s + 1
    Dq, Hq, Wq = -(-Dp // s), -(-Hp // s), -(-Wp // s)
    L = B * Dq * Hq * Wq
    taps = []
    for i in range(k):
        for j in range(k):
            for l in range(k):
                phase = ((i % s) * s + j % s) * s + l % s
                taps.append((phase, (i // s) * Hq * Wq + (j // s) * Wq + l // s))
    tail = max(o for _, o in taps)

    def to_phases(v, width):
        # [B, s*Dq, s*Hq, s*Wq, width] -> [s^3, L, width]
        v = v.reshape(B, Dq, s, Hq, s, Wq, s, width).transpose(2, 4, 6, 0, 1, 3, 5, 7)
        return v.reshape(s ** 3, L, width)

    xg = np.zeros((B, s * Dq, s * Hq, s * Wq, C), dtype=xd.dtype)
    xg[:, p:p + D, p:p + H, p:p + W] = xd.transpose(0, 2, 3, 4, 1)
    xf = np.zeros((s ** 3, L + tail, C), dtype=xd.dtype)
    xf[:, :L] = to_phases(xg, C)
    wk = np.ascontiguousarray(wk5.transpose(2, 3, 4, 1, 0)).reshape(k ** 3, C, O)
    acc = np.zeros((L, O), dtype=xd.dtype)
    for t, (ph, o) in enumerate(taps):
        acc += xf[ph, o:o + L] @ wk[t]
    out = acc.reshape(B, Dq, Hq, Wq, O)[:, :Do, :Ho, :Wo].transpose(0, 4, 1, 2, 3)

    def bw(g5, want_x, want_k):
        gf = np.zeros((B, Dq, Hq, Wq, O), dtype=g5.dtype)
        gf[:, :Do, :Ho, :Wo] = g5.transpose(0, 2, 3, 4, 1)
        gf = gf.reshape(L, O)
        gk = np.empty((k ** 3, C, O), dtype=g5.dtype) if want_k else None
        gxf = np.zeros((s ** 3, L + tail, C), dtype=g5.dtype) if want_x else None
        for t, (ph, o) in enumerate(taps):
            if want_k:
                gk[t] = xf[ph, o:o + L].T @ gf
            if want_x:
                gxf[ph, o:o + L] += gf @ wk[t].T
        gx = None
        if want_x:
            gx = gxf[:, :L].reshape(s, s, s, B, Dq, Hq, Wq, C).transpose(3, 4, 0, 5, 1, 6, 2, 7)
            gx = gx.reshape(B, s * Dq, s * Hq, s * Wq, C)[:, p:p + D, p:p + H, p:p + W]
            gx = gx.transpose(0, 4, 1, 2, 3)
        if want_k:
            gk = np.ascontiguousarray(gk.reshape(k, k, k, C, O).transpose(4, 3, 0, 1, 2))
        return gx, gk

    return out, bw


def conv3d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a [C,D,H,W] (or batched [B,C,D,H,W]) volume with a cubic kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd = x.data
    batched = xd.ndim == 5
    if not batched:
        if xd.ndim != 4:
            raise ShapeError(f"conv3d expects rank 4 or 5 input, got {xd.shape}")
        xd = xd[None]
    if kernel.ndim != 5:
        raise ShapeError(f"kernel must be [C_out,C_in,k,k,k], got {kernel.shape}")
    B, C, D, H, W = xd.shape
    O, Ck, k = kernel.shape[0], kernel.shape[1], kernel.shape[2]
    if Ck != C:
        raise ShapeError(f"kernel expects {Ck} input channels, volume has {C}")
    if kernel.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ShapeError(f"kernel must be cubic with odd extent, got {kernel.shape[2:]}")
    if padding not in (0, (k - 1) // 2):
        raise ShapeError(f"padding must be 0 or {(k - 1) // 2}")
    p, s = padding, stride
    Do, Ho, Wo = ((n + 2 * p - k) // s + 1 for n in (D, H, W))
    if min(Do, Ho, Wo) <= 0:
        raise ShapeError("kernel larger than padded volume")
    wm = kernel.data.reshape(O, C * k ** 3)
    shift = k > 1 and C >= SHIFT_MIN_CHANNELS

    if shift:
        out, shift_bw = _conv_shift(xd, kernel.data, p, s)
    elif k == 1 and s == 1:
        cols = xd.transpose(1, 0, 2, 3, 4).reshape(C, -1)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
        cols = np.empty((C, k, k, k, B, Do, Ho, Wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    patch = xp[:, :, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s]
                    cols[:, i, j, l] = patch.transpose(1, 0, 2, 3, 4)
        cols = cols.reshape(C * k ** 3, -1)

    if not shift:
        out = (wm @ cols).reshape(O, B, Do, Ho, Wo).transpose(1, 0, 2, 3, 4)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1, 1)
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]

    def bw(g):
        gb5 = g if batched else g[None]
        gx = gk = gbias = None
        if bias is not None and bias.requires_grad:
            gbias = gb5.sum(axis=(0, 2, 3, 4)).reshape(bias.shape)
        if shift:
            gxd, gk = shift_bw(gb5, x.requires_grad, kernel.requires_grad)
            if gxd is not None:
                gx = np.ascontiguousarray(gxd if batched else gxd[0])
            return (gx, gk) if bias is None else (gx, gk, gbias)
        gm = np.ascontiguousarray(gb5.transpose(1, 0, 2, 3, 4)).reshape(O, -1)
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            gcols = wm.T @ gm
            if k == 1 and s == 1:
                gxd = gcols.reshape(C, B, D, H, W).transpose(1, 0, 2, 3, 4)
            else:
                gcols = gcols.reshape(C, k, k, k, B, Do, Ho, Wo)
                gxp = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            gxp[:, :, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s] += \
                                gcols[:, i, j, l].transpose(1, 0, 2, 3, 4)
                gxd = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
            gx = np.ascontiguousarray(gxd if batched else gxd[0])
        return (gx, gk) if bias is None else (gx, gk, gbias)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, bw, "conv3d")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # align_corners=False: source coordinate (i + 0.5) * n_in / n_out - 0.5, clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - w)
    np.add.at(m, (np.arange(n_out), i1), w)
    return m


def _apply_axis(m: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)


def trilinear_upsample(x, target_spatial_shape: Iterable[int]) -> Tensor:
    """Trilinear resize of the last three axes (align-corners-false)."""
    x = as_tensor(x)
    target = tuple(int(t) for t in target_spatial_shape)
    if x.ndim < 3 or len(target) != 3:
        raise ShapeError("trilinear_upsample needs three spatial axes")
    spatial = x.shape[-3:]
    if min(spatial) == 0 or min(target) == 0:
        raise ShapeError("zero-size spatial axis")
    if any(t < s for t, s in zip(target, spatial)):
        raise ShapeError(f"target {target} smaller than input {spatial}")
    if target == spatial:
        return _record(x.data, (x,), lambda g: (g,), "upsample")
    ndim = x.ndim
    mats = [(ndim - 3 + i, _interp_matrix(s, t, x.dtype)) for i, (s, t) in enumerate(zip(spatial, target)) if s != t]
    out = x.data
    for ax, m in mats:
        out = _apply_axis(m, out, ax)
    out = np.ascontiguousarray(out)

    def bw(g):
        g = np.ascontiguousarray(g)
        for ax, m in reversed(mats):
            g = _apply_axis(m.T, g, ax)
        return (np.ascontiguousarray(g),)

    return _record(out, (x,), bw, "upsample")


# graph ----------------------------------------------------------------------


class GradGraph:
    """Reverse topological schedule of the subgraph feeding ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        root = self.output
        if root.size != 1:
            raise ShapeError(f"backward seed must be scalar, got shape {root.shape}")
        adj = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = pg if key not in adj else adj[key] + pg
        for node in self.nodes:
            if node._parents:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> list:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients of ``leaves`` (zeros for leaves off the path).
    """
    if loss.size != 1:
        raise ShapeError(f"backward seed must be scalar, got shape {loss.shape}")
    if loss.requires_grad:
        GradGraph(loss).backward()
    if leaves is None:
        return []
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def finite_diff_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
                      eps: float = 1e-6, coords: Sequence[int] | None = None) -> float:
    """Max relative error between autodiff and central differences of scalar ``f``.

    ``coords`` restricts the comparison to a subset of flat coordinates.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with default_dtype(np.float64):
        x = Tensor(x0.copy(), requires_grad=True)
        y = f(x)
        if not np.all(np.isfinite(y.data)):
            raise NumericError("f is not finite at the evaluation point")
        (analytic,) = backward(y, [x])
        analytic = analytic.reshape(-1)
        idx = range(x0.size) if coords is None else coords
        worst = 0.0
        flat = x0.reshape(-1)
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                xp = flat.copy()
                xp[i] += sign * step
                with no_grad():
                    v = f(Tensor(xp.reshape(x0.shape))).item()
                if not np.isfinite(v):
                    raise NumericError(f"f not finite after perturbing coordinate {i}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            a = float(analytic[i])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
            worst = max(worst, err)
    return worst
