"""Minimal define-by-run autodiff engine on numpy arrays.

Tensors default to float32; the finite-difference checker promotes its
inputs to float64 so that linear ops can be verified to 1e-6. The graph
is rebuilt on every forward pass: each Tensor produced by an op keeps
references to its parents and a closure that routes the incoming
gradient to them. `backward` topologically sorts that implicit graph and
accumulates gradients into every tensor that requires them, including
intermediates (needed by the heatmap module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32

NORM_FLOOR = 1e-12  # denominator floor for L2 normalization


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's algebraic rule."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = (t.grad + g).astype(t.data.dtype, copy=False)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.data = data  # keep dtype of the computed array (float64 in checks)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Reverse pass from a scalar loss; accumulates into .grad fields."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- elementwise & structural ops ---------------------------------------


def _wrap_pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b), dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a), dtype=b.dtype), b
    return _wrap(a), _wrap(b)


def add(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a, b):
    a, b = _wrap_pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), bwd)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: operands must be at least 1-D")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        ad, bd = a.data, b.data
        g_ = g
        if ad.ndim == 1 and bd.ndim == 1:
            _accumulate(a, g_ * bd)
            _accumulate(b, g_ * ad)
            return
        if ad.ndim == 1:  # (k,) @ (..., k, n)
            ga = np.matmul(g_[..., None, :], np.swapaxes(bd, -1, -2))[..., 0, :]
            _accumulate(a, _unbroadcast(ga, a.shape))
            gb = np.matmul(ad[:, None], g_[..., None, :])
            _accumulate(b, _unbroadcast(gb, b.shape))
            return
        if bd.ndim == 1:  # (..., m, k) @ (k,)
            ga = g_[..., :, None] * bd
            _accumulate(a, _unbroadcast(ga, a.shape))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g_[..., :, None])[..., 0]
            _accumulate(b, _unbroadcast(gb, b.shape))
            return
        ga = np.matmul(g_, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g_)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), bwd)


def relu(x):
    x = _wrap(x)
    data = np.maximum(x.data, 0)

    def bwd(g):
        _accumulate(x, g * (x.data > 0))

    return _make(data, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU; forward and backward use the same formula."""
    x = _wrap(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))
    data = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        dydx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        _accumulate(x, g * dydx)

    return _make(data, (x,), bwd)


def exp(x):
    x = _wrap(x)
    data = np.exp(x.data)

    def bwd(g):
        _accumulate(x, g * data)

    return _make(data, (x,), bwd)


def log(x):
    x = _wrap(x)
    data = np.log(x.data)

    def bwd(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), bwd)


def sqrt(x):
    x = _wrap(x)
    data = np.sqrt(x.data)

    def bwd(g):
        _accumulate(x, g * 0.5 / np.maximum(data, 1e-12))

    return _make(data, (x,), bwd)


def astype(x, dtype):
    """Dtype cast; the reverse pass casts back via the parent's dtype."""
    x = _wrap(x)
    data = x.data.astype(dtype)

    def bwd(g):
        _accumulate(x, g)

    return _make(data, (x,), bwd)


def clip(x, lo, hi):
    x = _wrap(x)
    data = np.clip(x.data, lo, hi)

    def bwd(g):
        mask = (x.data >= lo) & (x.data <= hi)
        _accumulate(x, g * mask)

    return _make(data, (x,), bwd)


def softmax(x, axis=-1):
    x = _wrap(x)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, data * (g - dot))

    return _make(data, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then affine with learnable gain/bias."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _accumulate(bias, g.sum(axis=reduce_axes))
        _accumulate(gain, (g * xhat).sum(axis=reduce_axes))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (gx - m1 - xhat * m2) * inv)

    return _make(data, (x, gain, bias), bwd)


def tensor_sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g_ = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            for a in sorted(axes):
                g_ = np.expand_dims(g_, a)
        _accumulate(x, np.broadcast_to(g_, x.shape).astype(x.dtype))

    return _make(data, (x,), bwd)


def tensor_mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a % x.ndim] for a in axes]))

    def bwd(g):
        g_ = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            for a in sorted(axes):
                g_ = np.expand_dims(g_, a)
        _accumulate(x, np.broadcast_to(g_, x.shape).astype(x.dtype) / count)

    return _make(data, (x,), bwd)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + str([t.shape for t in tensors]))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + s)
            _accumulate(t, g[tuple(sl)])
            start += s

    return _make(data, tuple(tensors), bwd)


def getitem(x, idx):
    x = _wrap(x)
    data = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(data, (x,), bwd)


def reshape(x, shape):
    x = _wrap(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), bwd)


def transpose(x, axes=None):
    x = _wrap(x)
    data = np.transpose(x.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bwd(g):
        _accumulate(x, np.transpose(g, inv))

    return _make(data, (x,), bwd)


def l2_normalize(x, axis=-1):
    """x / max(||x||, floor) along `axis`; safe on zero vectors."""
    x = _wrap(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, NORM_FLOOR)
    data = x.data / denom

    def bwd(g):
        live = norm > NORM_FLOOR  # below the floor the denominator is constant
        dot = (g * data).sum(axis=axis, keepdims=True)
        gx = (g - np.where(live, data * dot, 0.0)) / denom
        _accumulate(x, gx)

    return _make(data, (x,), bwd)


def cosine_similarity(a, b, axis=-1):
    """Cosine of the angle between a and b along `axis` (floored norms)."""
    an = l2_normalize(_wrap(a), axis=axis)
    bn = l2_normalize(_wrap(b), axis=axis)
    return tensor_sum(mul(an, bn), axis=axis)


def conv2d(x, w, bias=None, stride=1):
    """2-D convolution with zero 'same'-style padding.

    x: (B, C_in, H, W) or (C_in, H, W); w: (C_out, C_in, k, k).
    Output spatial dims are ceil(H/stride); for even H and stride 2 this
    halves the input exactly.
    """
    x, w = _wrap(x), _wrap(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input/weight, got {x.shape}/{w.shape}")
    B, cin, H, W = xd.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ShapeError(f"conv2d: weight {w.shape} does not match input {x.shape}")
    s = stride
    Ho = -(-H // s)
    Wo = -(-W // s)
    pad_h = max((Ho - 1) * s + k - H, 0)
    pad_w = max((Wo - 1) * s + k - W, 0)
    ph0, pw0 = pad_h // 2, pad_w // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph0, pad_h - ph0), (pw0, pad_w - pw0)))
    Hp, Wp = xp.shape[2], xp.shape[3]

    acc = np.zeros((B, Ho, Wo, cout), dtype=xd.dtype)
    slices = []
    for di in range(k):
        for dj in range(k):
            xs = xp[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s]
            slices.append(xs)
            acc += np.tensordot(xs, w.data[:, :, di, dj], axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias must be ({cout},), got {bias.shape}")
        out = out + bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        gd = g[None] if squeeze else g
        gt = gd.transpose(0, 2, 3, 1)  # (B, Ho, Wo, cout)
        if bias is not None:
            _accumulate(bias, gt.sum(axis=(0, 1, 2)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            idx = 0
            for di in range(k):
                for dj in range(k):
                    gw[:, :, di, dj] = np.tensordot(
                        gt, slices[idx], axes=([0, 1, 2], [0, 2, 3]))
                    idx += 1
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros((B, cin, Hp, Wp), dtype=xd.dtype)
            for di in range(k):
                for dj in range(k):
                    gslice = np.tensordot(gt, w.data[:, :, di, dj], axes=([3], [0]))
                    gxp[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s] += \
                        gslice.transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph0:ph0 + H, pw0:pw0 + W]
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out, parents, bwd)


# -- verification harness ------------------------------------------------


def grad_check(op_closure, inputs, eps=1e-3):
    """Max relative error between analytic and central-difference grads.

    `op_closure` maps a list of Tensors to a scalar Tensor. Inputs are
    promoted to float64 so the comparison is limited by the math, not by
    float32 rounding in the difference quotient.
    """
    ts = [Tensor(np.asarray(i.data if isinstance(i, Tensor) else i),
                 requires_grad=True, dtype=np.float64) for i in inputs]
    out = op_closure(ts)
    if out.data.size != 1:
        raise ShapeError("grad_check: closure must return a scalar")
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in ts]

    worst = 0.0
    for ti, t in enumerate(ts):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = op_closure(ts).item()
            flat[j] = orig - eps
            f_minus = op_closure(ts).item()
            flat[j] = orig
            cd = (f_plus - f_minus) / (2 * eps)
            an = analytic[ti].reshape(-1)[j]
            err = abs(an - cd) / max(abs(an), abs(cd), 1e-6)
            worst = max(worst, err)
    return worst


# -- Adam ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update with bias correction; mutates params in place."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.data.shape} "
                f"for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** state.t)
        vhat = v / (1 - b2 ** state.t)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
    return params, state
