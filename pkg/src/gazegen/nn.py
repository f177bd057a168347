"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine: every primitive computes its value eagerly in
float64 and, when tracing is enabled and some input requires a gradient,
records a vector-Jacobian closure. `backward` walks the tape once and
accumulates exact analytic gradients into the participating leaves.

Shapes follow the model's needs: sequences are (length, channels), attention
stacks are (heads, length, head_dim). There is no batch axis.
"""

from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


def _tracing_enabled() -> bool:
    return getattr(_state, "grad", True)


class no_grad:
    """Context manager that disables tape recording (values are unchanged)."""

    def __enter__(self):
        self._prev = _tracing_enabled()
        _state.grad = False
        return self

    def __exit__(self, *exc):
        _state.grad = self._prev
        return False


class Tensor:
    """A node in the computation graph. Leaves carry parameters or inputs."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "_needs")

    def __init__(self, value, parents=(), vjp=None, needs=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self._needs = needs

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, needs={self._needs})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Tensor:
    """A gradient-carrying leaf (parameter or differentiable input)."""
    return Tensor(value, needs=True)


def constant(value) -> Tensor:
    return Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace(*ts: Tensor) -> bool:
    return _tracing_enabled() and any(t._needs for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients of `root` into every reachable leaf's `.grad`."""
    if seed is None:
        seed = np.ones_like(root.value)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(node.grad)):
            if pg is None or not parent._needs:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value
    if not _trace(a, b):
        return Tensor(out)

    def vjp(g):
        return (
            _unbroadcast(g, a.value.shape) if a._needs else None,
            _unbroadcast(g, b.value.shape) if b._needs else None,
        )

    return Tensor(out, (a, b), vjp, needs=True)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value
    if not _trace(a, b):
        return Tensor(out)

    def vjp(g):
        return (
            _unbroadcast(g, a.value.shape) if a._needs else None,
            _unbroadcast(-g, b.value.shape) if b._needs else None,
        )

    return Tensor(out, (a, b), vjp, needs=True)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value
    if not _trace(a, b):
        return Tensor(out)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape) if a._needs else None,
            _unbroadcast(g * a.value, b.value.shape) if b._needs else None,
        )

    return Tensor(out, (a, b), vjp, needs=True)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value @ b.value
    if not _trace(a, b):
        return Tensor(out)

    def vjp(g):
        ga = gb = None
        if a._needs:
            ga = _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)
        if b._needs:
            gb = _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)
        return (ga, gb)

    return Tensor(out, (a, b), vjp, needs=True)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.value.reshape(shape)
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (g.reshape(a.value.shape),)

    return Tensor(out, (a,), vjp, needs=True)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    out = a.value.transpose(axes)
    if not _trace(a):
        return Tensor(out)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return Tensor(out, (a,), vjp, needs=True)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (np.ascontiguousarray(_expand_reduced(g, a.value.shape, axis, keepdims)),)

    return Tensor(out, (a,), vjp, needs=True)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size / max(out.size, 1)

    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (
            np.ascontiguousarray(_expand_reduced(g, a.value.shape, axis, keepdims)) / count,
        )

    return Tensor(out, (a,), vjp, needs=True)


def powc(a, exponent: float) -> Tensor:
    a = _wrap(a)
    out = a.value**exponent
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (g * exponent * a.value ** (exponent - 1.0),)

    return Tensor(out, (a,), vjp, needs=True)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.value)
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (g * out,)

    return Tensor(out, (a,), vjp, needs=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _wrap(a)
    s = _sigmoid(a.value)
    out = a.value * s
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        return (g * (s * (1.0 + a.value * (1.0 - s))),)

    return Tensor(out, (a,), vjp, needs=True)


def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _trace(a):
        return Tensor(out)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return Tensor(out, (a,), vjp, needs=True)


def concat(parts, axis=0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    if not _trace(*parts):
        return Tensor(out)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(
            np.ascontiguousarray(piece) if p._needs else None
            for p, piece in zip(parts, pieces)
        )

    return Tensor(out, tuple(parts), vjp, needs=True)


def linear(x, w, b) -> Tensor:
    """Affine map: (L, Din) @ (Dout, Din)^T + (Dout,), or 1-d x -> 1-d out."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    xv, wv, bv = x.value, w.value, b.value
    out = xv @ wv.T + bv
    if not _trace(x, w, b):
        return Tensor(out)

    def vjp(g):
        gx = gw = gb = None
        if x._needs:
            gx = g @ wv
        if w._needs:
            gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        if b._needs:
            gb = g if xv.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gb)

    return Tensor(out, (x, w, b), vjp, needs=True)


def conv1d(x, w, b, pad: int) -> Tensor:
    """Length-preserving 1-d convolution: x (L, Cin), w (Cout, Cin, K), b (Cout,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    xv, wv, bv = x.value, w.value, b.value
    cout, cin, kk = wv.shape
    length = xv.shape[0]
    xp = np.pad(xv, ((pad, pad), (0, 0))) if pad else xv
    cols = np.ascontiguousarray(np.lib.stride_tricks.sliding_window_view(xp, kk, axis=0))
    lo = cols.shape[0]
    cols2 = cols.reshape(lo, cin * kk)
    w2 = wv.transpose(1, 2, 0).reshape(cin * kk, cout)
    out = cols2 @ w2 + bv
    if not _trace(x, w, b):
        return Tensor(out)

    def vjp(g):
        gx = gw = gb = None
        if b._needs:
            gb = g.sum(axis=0)
        if w._needs:
            gw = (cols2.T @ g).reshape(cin, kk, cout).transpose(2, 0, 1)
        if x._needs:
            gcols = (g @ w2.T).reshape(lo, cin, kk)
            gxp = np.zeros_like(xp)
            for off in range(kk):
                gxp[off : off + lo] += gcols[:, :, off]
            gx = gxp[pad : pad + length] if pad else gxp
        return (gx, gw, gb)

    return Tensor(out, (x, w, b), vjp, needs=True)


def avgpool2(x) -> Tensor:
    """Halve the sequence length by averaging adjacent pairs: (L, C) -> (L/2, C)."""
    x = _wrap(x)
    length, ch = x.value.shape
    if length % 2:
        raise ValueError(f"avgpool2 needs an even length, got {length}")
    out = x.value.reshape(length // 2, 2, ch).mean(axis=1)
    if not _trace(x):
        return Tensor(out)

    def vjp(g):
        return (np.repeat(g * 0.5, 2, axis=0),)

    return Tensor(out, (x,), vjp, needs=True)


def upsample2(x) -> Tensor:
    """Nearest-neighbor doubling of the sequence length: (L, C) -> (2L, C)."""
    x = _wrap(x)
    length, ch = x.value.shape
    out = np.repeat(x.value, 2, axis=0)
    if not _trace(x):
        return Tensor(out)

    def vjp(g):
        return (g.reshape(length, 2, ch).sum(axis=1),)

    return Tensor(out, (x,), vjp, needs=True)


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the channel axis of (L, C)."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value
    if not _trace(x, gain, bias):
        return Tensor(out)

    def vjp(g):
        gx = gg = gb = None
        if gain._needs:
            gg = (g * xhat).sum(axis=0)
        if bias._needs:
            gb = g.sum(axis=0)
        if x._needs:
            dxhat = g * gain.value
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return (gx, gg, gb)

    return Tensor(out, (x, gain, bias), vjp, needs=True)


def groupnorm(x, gain, bias, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization of (L, C) with statistics over length and group channels."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xv = x.value
    length, ch = xv.shape
    if ch % groups:
        raise ValueError(f"channels {ch} not divisible by groups {groups}")
    xg = xv.reshape(length, groups, ch // groups)
    mu = xg.mean(axis=(0, 2), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(length, ch)
    out = xhat * gain.value + bias.value
    if not _trace(x, gain, bias):
        return Tensor(out)

    def vjp(g):
        gx = gg = gb = None
        if gain._needs:
            gg = (g * xhat).sum(axis=0)
        if bias._needs:
            gb = g.sum(axis=0)
        if x._needs:
            dxhat = (g * gain.value).reshape(length, groups, ch // groups)
            xhat_g = xhat.reshape(length, groups, ch // groups)
            m1 = dxhat.mean(axis=(0, 2), keepdims=True)
            m2 = (dxhat * xhat_g).mean(axis=(0, 2), keepdims=True)
            gx = (inv * (dxhat - m1 - xhat_g * m2)).reshape(length, ch)
        return (gx, gg, gb)

    return Tensor(out, (x, gain, bias), vjp, needs=True)
