"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every primitive returns a new ``Tensor`` that
remembers its parents and a closure mapping the output gradient to input
gradients. ``backward`` orders the reachable nodes into a ``Tape`` and replays
it once in reverse.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as sf
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out._consumed = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced by forward pass")
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Nodes reachable from a loss, ordered so producers precede consumers."""

    def __init__(self, loss: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        # creation order is a valid topological order for define-by-run graphs
        nodes.sort(key=lambda n: n._seq)
        self.records = nodes

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor) -> Tape:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed; run a new forward pass first")
    if loss._backward is None:
        raise TapeError("loss has no recorded operations (empty tape)")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.records):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._consumed:
            raise TapeError("tape already consumed; run a new forward pass first")
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape.records:
        if node._backward is not None:
            node._consumed = True
            node._backward = _spent
    return tape


def _spent(g):
    raise TapeError("tape already consumed; run a new forward pass first")


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if not xs:
        raise ShapeError("add_n needs at least one tensor")
    for x in xs[1:]:
        _check_same(xs[0], x, "add_n")
    data = xs[0].data.copy()
    for x in xs[1:]:
        data += x.data
    return _result(data, tuple(xs), lambda g: (g,) * len(xs))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python scalar or a size-1 tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: factor must have one element, got shape {s.shape}")
        sv = s.data.reshape(-1)[0]
        ad = a.data
        return _result(
            ad * sv, (a, s), lambda g: (g * sv, np.array(np.sum(g * ad)).reshape(s.shape))
        )
    c = float(s)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    if op_kind == "add":
        return add(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """sum_k w[k] * xs[k] for a 1-D weight tensor."""
    if w.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: weights shape {w.shape} for {len(xs)} inputs")
    for x in xs[1:]:
        _check_same(xs[0], x, "weighted_sum")
    wd = w.data
    out = np.zeros_like(xs[0].data)
    for k, x in enumerate(xs):
        out += wd[k] * x.data
    datas = [x.data for x in xs]

    def bw(g):
        gw = np.array([np.vdot(g, d) for d in datas])
        return tuple(g * wd[k] for k in range(len(xs))) + (gw,)

    return _result(out, tuple(xs) + (w,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} for weight {weight.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(xd @ wd.T + bias.data, (x, weight, bias), bw)


def _pad3(a: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p), (p, p)), constant_values=value)


def _out_len(n: int, k_eff: int, stride: int) -> int:
    return (n - k_eff) // stride + 1


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int) -> np.ndarray:
    """Raw cross-correlation of an already padded input, im2col style."""
    k = w.shape[2:]
    ke = tuple((kk - 1) * dilation + 1 for kk in k)
    win = sliding_window_view(xp, ke, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride, ::dilation, ::dilation, ::dilation]
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _dilate_kernel(w: np.ndarray, dilation: int) -> np.ndarray:
    if dilation == 1:
        return w
    ke = tuple((kk - 1) * dilation + 1 for kk in w.shape[2:])
    wd = np.zeros(w.shape[:2] + ke)
    wd[:, :, ::dilation, ::dilation, ::dilation] = w
    return wd


def _use_fft(xp_shape, w_shape, stride: int, depthwise: bool = False) -> bool:
    # few channels at high resolution: FFT beats im2col; wide/low-res: im2col wins
    if stride != 1 or int(np.prod(w_shape[2:])) < 27 or min(xp_shape[2:]) < 8:
        return False
    return depthwise or w_shape[0] * w_shape[1] <= 16


_AX = (2, 3, 4)


class _FFTConv:
    """Stride-1 correlation y = corr(xp, w) and its two adjoints via real FFTs.

    Circular transforms of the padded-input size never wrap into the valid
    output region, so results equal the direct sums up to rounding.
    """

    def __init__(self, xp: np.ndarray, w: np.ndarray, dilation: int, depthwise: bool):
        self.S = xp.shape[2:]
        self.wd = _dilate_kernel(w, dilation)
        self.ke = self.wd.shape[2:]
        self.dilation = dilation
        self.depthwise = depthwise
        self.X = sf.rfftn(xp, axes=_AX)
        self.K = sf.rfftn(self.wd, s=self.S, axes=_AX)
        self.out = tuple(s - e + 1 for s, e in zip(self.S, self.ke))

    def forward(self) -> np.ndarray:
        if self.depthwise:
            Y = self.X * np.conj(self.K[:, 0])[None]
        else:
            Y = np.einsum("bifgh,oifgh->bofgh", self.X, np.conj(self.K))
        y = sf.irfftn(Y, s=self.S, axes=_AX)
        o = self.out
        return np.ascontiguousarray(y[:, :, :o[0], :o[1], :o[2]])

    def grads(self, g: np.ndarray, need_x: bool, need_w: bool):
        G = sf.rfftn(g, s=self.S, axes=_AX)
        gxp = gw = None
        if need_x:
            if self.depthwise:
                GX = G * self.K[:, 0][None]
            else:
                GX = np.einsum("bofgh,oifgh->bifgh", G, self.K)
            gxp = sf.irfftn(GX, s=self.S, axes=_AX)
        if need_w:
            if self.depthwise:
                GW = (self.X * np.conj(G)).sum(axis=0)[:, None]
            else:
                GW = np.einsum("bifgh,bofgh->oifgh", self.X, np.conj(G))
            r = sf.irfftn(GW, s=self.S, axes=_AX)
            e, d = self.ke, self.dilation
            gw = np.ascontiguousarray(r[:, :, :e[0]:d, :e[1]:d, :e[2]:d])
        return gxp, gw


def _crop(a: np.ndarray, p: int, shape) -> np.ndarray:
    return a[:, :, p:p + shape[2], p:p + shape[3], p:p + shape[4]]


def conv3d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """3D cross-correlation without bias. x: [B,Ci,D,H,W], weight: [Co,Ci,kd,kh,kw]."""
    if x.data.ndim != 5 or weight.data.ndim != 5 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weight {weight.shape}")
    wd = weight.data
    xp = _pad3(x.data, padding)
    ke = tuple((kk - 1) * dilation + 1 for kk in wd.shape[2:])
    if any(n < k for n, k in zip(xp.shape[2:], ke)):
        raise ShapeError(f"conv3d: kernel extent {ke} exceeds padded input {xp.shape[2:]}")
    in_shape = x.shape

    if _use_fft(xp.shape, wd.shape, stride):
        fc = _FFTConv(xp, wd, dilation, depthwise=False)

        def bw_fft(g):
            gxp, gw = fc.grads(g, x.requires_grad, weight.requires_grad)
            return (None if gxp is None else _crop(gxp, padding, in_shape)), gw

        return _result(fc.forward(), (x, weight), bw_fft)

    out = _correlate(xp, wd, stride, dilation)

    def bw(g):
        gw = gx = None
        if weight.requires_grad:
            win = sliding_window_view(xp, ke, axis=(2, 3, 4))
            win = win[:, :, ::stride, ::stride, ::stride, ::dilation, ::dilation, ::dilation]
            gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            if stride == 1:
                gp = np.pad(g, ((0, 0), (0, 0)) + tuple((e - 1, e - 1) for e in ke))
                wt = np.flip(wd, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4)
                gxp = _correlate(gp, np.ascontiguousarray(wt), 1, dilation)
            else:
                gxp = np.zeros_like(xp)
                Do, Ho, Wo = g.shape[2:]
                for a in range(wd.shape[2]):
                    for b in range(wd.shape[3]):
                        for c in range(wd.shape[4]):
                            contrib = np.tensordot(g, wd[:, :, a, b, c], axes=([1], [0]))
                            gxp[:, :,
                                a * dilation: a * dilation + (Do - 1) * stride + 1: stride,
                                b * dilation: b * dilation + (Ho - 1) * stride + 1: stride,
                                c * dilation: c * dilation + (Wo - 1) * stride + 1: stride] += \
                                contrib.transpose(0, 4, 1, 2, 3)
            gx = _crop(gxp, padding, in_shape)
        return gx, gw

    return _result(out, (x, weight), bw)


def depthwise_conv3d(x: Tensor, weight: Tensor, padding: int = 0, dilation: int = 1) -> Tensor:
    """Per-channel 3D correlation, stride 1. weight: [C,1,kd,kh,kw]."""
    if x.data.ndim != 5 or weight.data.ndim != 5 or weight.shape[:2] != (x.shape[1], 1):
        raise ShapeError(f"depthwise_conv3d: input {x.shape} incompatible with weight {weight.shape}")
    wd = weight.data
    xp = _pad3(x.data, padding)
    kd, kh, kw = wd.shape[2:]
    Do = _out_len(xp.shape[2], (kd - 1) * dilation + 1, 1)
    Ho = _out_len(xp.shape[3], (kh - 1) * dilation + 1, 1)
    Wo = _out_len(xp.shape[4], (kw - 1) * dilation + 1, 1)
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"depthwise_conv3d: kernel exceeds padded input {xp.shape[2:]}")
    in_shape = x.shape

    if _use_fft(xp.shape, wd.shape, 1, depthwise=True):
        fc = _FFTConv(xp, wd, dilation, depthwise=True)

        def bw_fft(g):
            gxp, gw = fc.grads(g, x.requires_grad, weight.requires_grad)
            return (None if gxp is None else _crop(gxp, padding, in_shape)), gw

        return _result(fc.forward(), (x, weight), bw_fft)

    offsets = [(a * dilation, b * dilation, c * dilation, a, b, c)
               for a in range(kd) for b in range(kh) for c in range(kw)]
    out = np.zeros(x.shape[:2] + (Do, Ho, Wo))
    for oa, ob, oc, a, b, c in offsets:
        out += xp[:, :, oa:oa + Do, ob:ob + Ho, oc:oc + Wo] * wd[:, 0, a, b, c][None, :, None, None, None]

    def bw(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for oa, ob, oc, a, b, c in offsets:
            sl = (slice(None), slice(None), slice(oa, oa + Do), slice(ob, ob + Ho), slice(oc, oc + Wo))
            if gw is not None:
                gw[:, 0, a, b, c] = np.einsum("bcdhw,bcdhw->c", g, xp[sl])
            if gxp is not None:
                gxp[sl] += g * wd[:, 0, a, b, c][None, :, None, None, None]
        return (None if gxp is None else _crop(gxp, padding, in_shape)), gw

    return _result(out, (x, weight), bw)


def normalize3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with statistics over batch and spatial axes."""
    if x.data.ndim != 5:
        raise ShapeError(f"normalize3d: expected [B,C,D,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"normalize3d: affine shapes {gamma.shape}, {beta.shape} for {C} channels")
    m = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
    if m == 0:
        raise ShapeError(f"normalize3d: zero spatial extent in {x.shape}")
    axes = (0, 2, 3, 4)
    mean = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None, None]
    out = xhat * gd + beta.data[None, :, None, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        dx = None
        if x.requires_grad:
            dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw)


def pool3d(mode: str, x: Tensor, kernel: int = 3, stride: int = 1, pad: int = 1) -> Tensor:
    """Max or average pooling; average divides by the count of in-bounds entries."""
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if x.data.ndim != 5:
        raise ShapeError(f"pool3d: expected [B,C,D,H,W], got {x.shape}")
    fill = -np.inf if mode == "max" else 0.0
    xp = _pad3(x.data, pad, fill)
    Do, Ho, Wo = (_out_len(n, kernel, stride) for n in xp.shape[2:])
    offsets = [(a, b, c) for a in range(kernel) for b in range(kernel) for c in range(kernel)]

    def window(a, b, c):
        return (slice(None), slice(None),
                slice(a, a + (Do - 1) * stride + 1, stride),
                slice(b, b + (Ho - 1) * stride + 1, stride),
                slice(c, c + (Wo - 1) * stride + 1, stride))

    in_shape = x.shape
    p = pad
    if mode == "max":
        out = np.full(x.shape[:2] + (Do, Ho, Wo), -np.inf)
        arg = np.zeros(out.shape, dtype=np.int64)
        for k, off in enumerate(offsets):
            v = xp[window(*off)]
            better = v > out  # strict: ties keep the first offset
            out = np.where(better, v, out)
            arg[better] = k

        def bw(g):
            gxp = np.zeros(xp.shape)
            for k, off in enumerate(offsets):
                gxp[window(*off)] += g * (arg == k)
            return (gxp[:, :, p:p + in_shape[2], p:p + in_shape[3], p:p + in_shape[4]],)

        return _result(out, (x,), bw)

    ones = _pad3(np.ones((1, 1) + x.shape[2:]), pad)
    total = np.zeros(x.shape[:2] + (Do, Ho, Wo))
    count = np.zeros((1, 1, Do, Ho, Wo))
    for off in offsets:
        total += xp[window(*off)]
        count += ones[window(*off)]
    out = total / count

    def bw(g):
        gs = g / count
        gxp = np.zeros(xp.shape)
        for off in offsets:
            gxp[window(*off)] += gs
        return (gxp[:, :, p:p + in_shape[2], p:p + in_shape[3], p:p + in_shape[4]],)

    return _result(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B,C,D,H,W] -> [B,C]"""
    n = x.shape[2] * x.shape[3] * x.shape[4]
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None, None] / n, shape).copy(),)

    return _result(x.data.mean(axis=(2, 3, 4)), (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [batch, K], got {logits.shape}")
    y = np.asarray(list(labels), dtype=np.int64)
    B, K = z.shape
    if y.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {y.shape[0]} labels for batch {B}")
    if ((y < 0) | (y >= K)).any():
        raise ValueError(f"labels must lie in [0, {K}), got {y.tolist()}")
    rows = np.arange(B)
    top = z.argmax(axis=1)
    zmax = z[rows, top]
    e = np.exp(z - zmax[:, None])
    e[rows, top] = 0.0
    # log1p of the non-max mass keeps tiny losses at full relative precision
    log_norm = np.log1p(e.sum(axis=1))
    loss = np.array(np.mean((zmax - z[rows, y]) + log_norm))
    prob = np.exp(z - (zmax + log_norm)[:, None])

    def bw(g):
        d = prob.copy()
        d[np.arange(B), y] -= 1.0
        return (d * (g / B),)

    return _result(loss, (logits,), bw)
