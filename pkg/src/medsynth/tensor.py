"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design: define-by-run. Ops execute eagerly on numpy arrays; while a Tape is
active, each op that touches a tracked tensor appends a node holding its
backward rule. `backward()` replays the nodes in exact reverse order and
accumulates gradients additively, so tensor reuse (fan-out) sums naturally.

Layouts are row-major and explicit: the only implicit broadcasting is
scalar-with-tensor. Everything else (biases, channel offsets) goes through
dedicated ops whose backward rules reduce over the broadcast axes.
Non-finite values are rejected whenever a Tensor is constructed, which makes
training divergence surface as a NumericError at the op that produced it.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # single-pass finiteness probe: any NaN/Inf poisons the sum
        if not np.isfinite(arr.sum()):
            raise NumericError("non-finite values at op boundary")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Recorded op list; one per training step (define-by-run, no caching)."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def watch(self, t: Tensor) -> None:
        self._tracked.add(id(t))

    def _wants(self, inputs: tuple[Tensor, ...]) -> bool:
        return any(t.requires_grad or id(t) in self._tracked for t in inputs)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append((out, inputs, backward))
        self._tracked.add(id(out))


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if _TAPE_STACK:
        tape = _TAPE_STACK[-1]
        if tape._wants(inputs):
            tape.record(out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of every reachable tracked/requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError("backward() needs a scalar loss")
    loss.grad = np.ones_like(loss.data)
    # rules consult the active tape to decide which inputs receive gradient,
    # so replay with this tape on the stack even if its context has exited
    _TAPE_STACK.append(tape)
    try:
        for out, inputs, rule in reversed(tape.nodes):
            if out.grad is None:
                continue
            rule(out.grad)
    finally:
        _TAPE_STACK.pop()


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or (bool(_TAPE_STACK) and id(t) in _TAPE_STACK[-1]._tracked)


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g)
        if _wants_grad(b):
            b.accumulate_grad(g)

    return _record(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g)
        if _wants_grad(b):
            b.accumulate_grad(-g)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g * b.data)
        if _wants_grad(b):
            b.accumulate_grad(g * a.data)

    return _record(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g * c)

    return _record(out, (a,), rule)


def shift(a: Tensor, c: float) -> Tensor:
    """a + scalar (the only scalar broadcast allowed)."""
    out = Tensor(a.data + float(c))

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g)

    return _record(out, (a,), rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g @ b.data.T)
        if _wants_grad(b):
            b.accumulate_grad(a.data.T @ g)

    return _record(out, (a, b), rule)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: (B,N,K) @ (B,K,M) -> (B,N,M)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm extents {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(np.matmul(g, b.data.transpose(0, 2, 1)))
        if _wants_grad(b):
            b.accumulate_grad(np.matmul(a.data.transpose(0, 2, 1), g))

    return _record(out, (a, b), rule)


# ------------------------------------------------------------- shape algebra


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.numel:
        raise DimensionError(f"reshape {a.shape} -> {shape}")
    out = Tensor(a.data.reshape(shape))
    src_shape = a.shape

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g.reshape(src_shape))

    return _record(out, (a,), rule)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _record(out, (a,), rule)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose2d expects 2-D")
    return permute(a, (1, 0))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis of (C,H,W) or (N,C,H,W)."""
    ax = a.data.ndim - 3
    if a.data.ndim != b.data.ndim or a.data.ndim not in (3, 4):
        raise DimensionError("concat_channels expects matching 3-D/4-D inputs")
    out = Tensor(np.concatenate([a.data, b.data], axis=ax))
    ca = a.shape[ax]

    def rule(g):
        ga, gb = np.split(g, [ca], axis=ax)
        if _wants_grad(a):
            a.accumulate_grad(ga)
        if _wants_grad(b):
            b.accumulate_grad(gb)

    return _record(out, (a, b), rule)


def slice_channels(a: Tensor, c0: int, c1: int) -> Tensor:
    ax = a.data.ndim - 3
    if a.data.ndim not in (3, 4):
        raise DimensionError("slice_channels expects 3-D/4-D input")
    out = Tensor(np.ascontiguousarray(np.take(a.data, range(c0, c1), axis=ax)))

    def rule(g):
        if _wants_grad(a):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[ax] = slice(c0, c1)
            full[tuple(sl)] = g
            a.accumulate_grad(full)

    return _record(out, (a,), rule)


def select0(a: Tensor, i: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data[i]))

    def rule(g):
        if _wants_grad(a):
            full = np.zeros_like(a.data)
            full[i] = g
            a.accumulate_grad(full)

    return _record(out, (a,), rule)


def stack0(parts: list[Tensor]) -> Tensor:
    out = Tensor(np.stack([p.data for p in parts]))

    def rule(g):
        for i, p in enumerate(parts):
            if _wants_grad(p):
                p.accumulate_grad(g[i])

    return _record(out, tuple(parts), rule)


# ----------------------------------------------------------------- reductions


def tsum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _record(out, (a,), rule)


def tmean(a: Tensor) -> Tensor:
    n = a.numel
    out = Tensor(a.data.mean())

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _record(out, (a,), rule)


# ---------------------------------------------------------------- activations


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # Inf is rejected by the Tensor ctor
        y = np.exp(a.data)
    out = Tensor(y)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g * y)

    return _record(out, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g * (1.0 - y * y))

    return _record(out, (a,), rule)


def silu(a: Tensor) -> Tensor:
    # sigmoid via tanh: one transcendental, stable across the whole range
    sig = 0.5 * np.tanh(0.5 * a.data) + 0.5
    out = Tensor(a.data * sig)

    def rule(g):
        if _wants_grad(a):
            a.accumulate_grad(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _record(out, (a,), rule)


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def rule(g):
        if _wants_grad(a):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))

    return _record(out, (a,), rule)


# ----------------------------------------------------------------- bias adds


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """(N,D) + (D,): explicit row-wise bias."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_row_bias {x.shape} + {b.shape}")
    out = Tensor(x.data + b.data[None, :])

    def rule(g):
        if _wants_grad(x):
            x.accumulate_grad(g)
        if _wants_grad(b):
            b.accumulate_grad(g.sum(axis=0))

    return _record(out, (x, b), rule)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Channel bias: (C,H,W)+(C,), (N,C,H,W)+(C,), or (N,C,H,W)+(N,C)."""
    xd, bd = x.data, b.data
    if xd.ndim == 3 and bd.ndim == 1 and bd.shape[0] == xd.shape[0]:
        view = bd[:, None, None]
        reduce_axes = (1, 2)
    elif xd.ndim == 4 and bd.ndim == 1 and bd.shape[0] == xd.shape[1]:
        view = bd[None, :, None, None]
        reduce_axes = (0, 2, 3)
    elif xd.ndim == 4 and bd.ndim == 2 and bd.shape == xd.shape[:2]:
        view = bd[:, :, None, None]
        reduce_axes = (2, 3)
    else:
        raise DimensionError(f"add_channel_bias {x.shape} + {b.shape}")
    out = Tensor(xd + view)

    def rule(g):
        if _wants_grad(x):
            x.accumulate_grad(g)
        if _wants_grad(b):
            b.accumulate_grad(g.sum(axis=reduce_axes))

    return _record(out, (x, b), rule)


# -------------------------------------------------------------- convolutions


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, k, k)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, padding: int):
    n, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding : padding + h, padding : padding + w]
    return out


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; x is (C,H,W) or (N,C,H,W), kernels (C',C,k,k)."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.data.ndim != 4:
        raise DimensionError("conv2d expects (N,C,H,W) input and (C',C,k,k) kernels")
    n, c, h, w = xd.shape
    co, ci, kh, kw = kernels.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"square odd kernels required, got {kh}x{kw}")
    if ci != c:
        raise DimensionError(f"kernel channels {ci} != input channels {c}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise DimensionError("non-integral conv output extent")
    cols, ho, wo = _im2col(xd, kh, stride, padding)
    kmat = kernels.data.reshape(co, ci * kh * kw)
    y = np.matmul(kmat[None], cols).reshape(n, co, ho, wo)
    out = Tensor(y[0] if single else y)

    def rule(g):
        gd = g[None] if single else g
        gflat = np.ascontiguousarray(gd.reshape(n, co, ho * wo))
        if _wants_grad(kernels):
            dk = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
            kernels.accumulate_grad(dk.reshape(kernels.shape))
        if _wants_grad(x):
            dcols = np.matmul(kmat.T[None], gflat)
            dx = _col2im(dcols, xd.shape, kh, stride, padding)
            x.accumulate_grad(dx[0] if single else dx)

    return _record(out, (x, kernels), rule)


def decimate2(x: Tensor) -> Tensor:
    """Keep every second pixel (even indices); pairs with stride-1 convs to
    halve resolution while every conv keeps integral output extents."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    y = np.ascontiguousarray(xd[:, :, ::2, ::2])
    out = Tensor(y[0] if single else y)

    def rule(g):
        if not _wants_grad(x):
            return
        gd = g[None] if single else g
        dx = np.zeros_like(xd)
        dx[:, :, ::2, ::2] = gd
        x.accumulate_grad(dx[0] if single else dx)

    return _record(out, (x,), rule)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    y = xd.repeat(factor, axis=2).repeat(factor, axis=3)
    out = Tensor(y[0] if single else y)
    f = factor

    def rule(g):
        if not _wants_grad(x):
            return
        gd = g[None] if single else g
        n, c, h, w = gd.shape
        dx = gd.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
        x.accumulate_grad(dx[0] if single else dx)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------- group norm


def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if c % groups:
        raise DimensionError(f"channels {c} not divisible by {groups} groups")
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError("gain/bias must be (C,)")
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    y = xhat * gain.data[None, :, None, None] + bias.data[None, :, None, None]
    out = Tensor(y[0] if single else y)
    m = xg.shape[2]  # elements per group

    def rule(g):
        gd = g[None] if single else g
        if _wants_grad(gain):
            gain.accumulate_grad((gd * xhat).sum(axis=(0, 2, 3)))
        if _wants_grad(bias):
            bias.accumulate_grad(gd.sum(axis=(0, 2, 3)))
        if _wants_grad(x):
            dxhat = (gd * gain.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            s1 = dxhat.sum(axis=2, keepdims=True)
            s2 = (dxhat * xh).sum(axis=2, keepdims=True)
            dx = inv * (dxhat - s1 / m - xh * s2 / m)
            dx = dx.reshape(n, c, h, w)
            x.accumulate_grad(dx[0] if single else dx)

    return _record(out, (x, gain, bias), rule)


# --------------------------------------------------------------- composites


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    return tmean(mul(d, d))
