"""Dense tensors with a small reverse-mode tape.

Each differentiable op records its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the recorded graph
in reverse topological order and accumulates into the ``grad`` buffers of
leaves that require gradients. Intermediate gradients are kept only for the
duration of the call, so the tape is released once backward returns.

Broadcasting follows numpy; gradients are summed back to each parent's
shape.
"""
from __future__ import annotations

import contextlib

import math

import numpy as np

from . import specfun

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "astype",
    "avgpool2d",
    "backward",
    "batchnorm",
    "clip_min",
    "conv2d",
    "conv2d_reference",
    "dense",
    "digamma_t",
    "div",
    "exp",
    "flatten",
    "grad_check",
    "lgamma_t",
    "log",
    "maxpool2d",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "softmax",
    "softplus_t",
    "sub",
    "sum",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from scalar ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.data.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _pair(a, b):
    # plain scalars/arrays adopt the dtype of the Tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def astype(a, dtype) -> Tensor:
    a = as_tensor(a)
    src = a.data.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _make(np.maximum(a.data, floor).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def softplus_t(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.asarray(specfun.softplus(x), dtype=x.dtype)
    # d/dx softplus = logistic(x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), lambda g: (g * sig,))


def digamma_t(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.asarray(specfun.digamma(x), dtype=x.dtype)
    return _make(out, (a,), lambda g: (g * np.asarray(specfun.trigamma(x), dtype=x.dtype),))


def lgamma_t(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.asarray(specfun.lgamma(x), dtype=x.dtype)
    return _make(out, (a,), lambda g: (g * np.asarray(specfun.digamma(x), dtype=x.dtype),))


def dirichlet_dce(a, y) -> Tensor:
    """Per-row expected cross-entropy under Dir(a) for one-hot ``y``, as one node.

    dce = psi(S) - sum y_k psi(a_k)
    ddce/da_k = psi'(S) - y_k psi'(a_k)
    """
    a = as_tensor(a)
    x = a.data
    y = np.asarray(y, dtype=x.dtype)
    s = x.sum(axis=-1, keepdims=True)
    out = specfun.digamma(s[..., 0]) - (y * specfun.digamma(x)).sum(axis=-1)

    def bw(g):
        d = specfun.trigamma(s) - y * specfun.trigamma(x)
        return ((g[..., None] * d).astype(x.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.dtype), (a,), bw)


def dirichlet_kl_uniform(a) -> Tensor:
    """Per-row KL(Dir(a) || Dir(1)) for a [B, K] >= 1, as one node.

    KL = lgamma(S) - lgamma(K) - sum lgamma(a_k) + sum (a_k - 1)(psi(a_k) - psi(S))
    dKL/da_k = (a_k - 1) psi'(a_k) - (S - K) psi'(S)
    """
    a = as_tensor(a)
    x = a.data
    k = x.shape[-1]
    s = x.sum(axis=-1, keepdims=True)
    out = (
        specfun.lgamma(s[..., 0])
        - math.lgamma(k)
        - specfun.lgamma(x).sum(axis=-1)
        + ((x - 1.0) * (specfun.digamma(x) - specfun.digamma(s))).sum(axis=-1)
    )

    def bw(g):
        d = (x - 1.0) * specfun.trigamma(x) - (s - k) * specfun.trigamma(s)
        return ((g[..., None] * d).astype(x.dtype, copy=False),)

    return _make(np.asarray(out, dtype=x.dtype), (a,), bw)


# ----------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).astype(a.data.dtype),)

    return _make(out, (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def flatten(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _make(a.data.reshape(shape[0], -1), (a,), lambda g: (g.reshape(shape),))


# ---------------------------------------------------------------------- layers


def dense(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for x [B, in], weight [in, out], bias [out]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"dense shape mismatch: x{x.shape} w{weight.shape} b{bias.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw)


def _out_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(f"non-integral conv output extent: n={n} k={k} stride={stride} padding={padding}")
    return span // stride + 1


def conv2d(x, kernel, bias, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, x [B,C,H,W] with kernel [O,C,k,k], via im2col."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C or kh != kw or bias.shape != (O,):
        raise ValueError(f"conv2d shape mismatch: x{x.shape} k{kernel.shape} b{bias.shape}")
    k = kh
    Ho, Wo = _out_extent(H, k, stride, padding), _out_extent(W, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    # channel-major columns: cols[c, i, j, b, ho, wo] = xp[b, c, ho*s + i, wo*s + j]
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride].transpose(1, 0, 2, 3)
    cols = cols.reshape(C * k * k, B * Ho * Wo)
    wmat = kernel.data.reshape(O, -1)
    out = (wmat @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3) + bias.data.reshape(1, O, 1, 1)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gk = (gm @ cols.T).reshape(kernel.shape)
        gb = gm.sum(axis=1)
        if not x.requires_grad:
            return None, gk, gb
        gcols = (wmat.T @ gm).reshape(C, k, k, B, Ho, Wo)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return gx, gk, gb

    return _make(out, (x, kernel, bias), bw)


def conv2d_reference(x, kernel, bias, stride=1, padding=0):
    """Direct nested-loop cross-correlation on plain arrays (test oracle)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    B, C, H, W = x.shape
    O, _, k, _ = kernel.shape
    Ho, Wo = _out_extent(H, k, stride, padding), _out_extent(W, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for p in range(Ho):
                for q in range(Wo):
                    acc = bias[o]
                    for c in range(C):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, c, p * stride + i, q * stride + j] * kernel[o, c, i, j]
                    out[b, o, p, q] = acc
    return out


def maxpool2d(x, size=2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first maximum
    in row-major window order."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"maxpool2d needs extents divisible by {size}, got {H}x{W}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [x.data[:, :, i::size, j::size] for i, j in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(offsets, views):
            hit = (v == out) & ~taken
            taken |= hit
            gx[:, :, i::size, j::size] = g * hit
        return (gx,)

    return _make(out, (x,), bw)


def avgpool2d(x, size=2) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % size or W % size:
        raise ValueError(f"avgpool2d needs extents divisible by {size}, got {H}x{W}")
    Ho, Wo = H // size, W // size
    out = x.data.reshape(B, C, Ho, size, Wo, size).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        return (gx.astype(x.data.dtype, copy=False),)

    return _make(out, (x,), bw)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5) -> Tensor:
    """Batch normalization over every axis except the feature/channel axis 1.

    ``running_mean`` and ``running_var`` are numpy arrays updated in place
    when ``training`` is true (unbiased variance, as PyTorch does).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    axes = (0,) if xd.ndim == 2 else (0,) + tuple(range(2, xd.ndim))
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    n = xd.size // xd.shape[1]
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch size >= 2")
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        running_mean *= 1.0 - momentum
        running_mean += (momentum * mu).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += (momentum * var * n / max(n - 1, 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.astype(xd.dtype).reshape(bshape)) * invstd.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gd
        if training:
            gx = (invstd.reshape(bshape) / n) * (
                n * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


# ------------------------------------------------------------------ checking


def grad_check(f, point, eps: float = 1e-5) -> float:
    """Max relative error between backward and central differences of ``f``.

    ``f`` maps a Tensor to a scalar Tensor. The check runs on a float64 copy
    of ``point``; the relative error per coordinate is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-8)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    backward(f(t))
    analytic = np.zeros_like(x0) if t.grad is None else t.grad.astype(np.float64)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
