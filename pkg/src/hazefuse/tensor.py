"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Layout convention for 4-D data is BCHW. Every forward op validates that its
result is finite; NaN/Inf raises NonFiniteError at the op that produced it.
Tensors that were not recorded on a tape are plain immutable values.
"""

from __future__ import annotations

import math
import threading

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

_TLS = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of ops; recording order is the topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


def _check_finite(arr, op):
    if arr.size == 0:
        return
    with np.errstate(over="ignore", invalid="ignore"):
        probe = float(arr.sum())
    if math.isfinite(probe):
        return
    # The one-pass probe can overflow on huge-but-finite values; confirm.
    lo, hi = float(arr.min()), float(arr.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Row-major float64 array, optionally participating in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "node", "tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op_name, out_data, inputs, backward_fn):
    """Wrap a forward result; register on the active tape when required."""
    _check_finite(out_data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.node = None
    out.tape = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(tuple(inputs), out, backward_fn)
        out.node = node
        out.tape = tape
        tape.nodes.append(node)
    else:
        out.requires_grad = False
    return out


def _accumulate(tensor, grad):
    # Backward fns hand over ownership: returned arrays are fresh, never
    # aliased between two inputs of one node, so the first accumulation can
    # adopt exclusively owned buffers instead of copying.
    if tensor.grad is None:
        if grad.base is not None or not grad.flags.writeable or not grad.flags.owndata:
            grad = grad.copy()
        tensor.grad = grad
    else:
        tensor.grad += grad


def backward(loss):
    """Populate grads of every tensor the scalar loss depends on.

    The traversal consumes the tape: each node is visited exactly once in
    reverse recording order, and its activations, closure buffers, and
    intermediate grads are released as soon as they have been used. A tape
    supports one backward pass.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    _accumulate(loss, np.ones_like(loss.data))
    if loss.node is None:
        return  # detached constant: nothing upstream receives gradient
    tape = loss.tape
    for node in reversed(tape.nodes):
        out = node.output
        if out is not None and out.grad is not None:
            grads = node.backward(out.grad)
            for t, g in zip(node.inputs, grads):
                if g is not None and t.requires_grad:
                    _accumulate(t, g)
            if out is not loss:
                out.grad = None  # intermediate grad fully consumed
        node.inputs = ()
        node.output = None
        node.backward = None
    tape.nodes.clear()


def _unbroadcast(grad, shape):
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    ash, bsh = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = _unbroadcast(g, ash) if need_a else None
        gb = _unbroadcast(g, bsh) if need_b else None
        if gb is ga and gb is not None:
            gb = gb.copy()  # keep the two accumulations unaliased
        return ga, gb

    return _record("add", out, (a, b), bwd)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = _unbroadcast(g * bd, ash) if need_a else None
        gb = _unbroadcast(g * ad, bsh) if need_b else None
        return ga, gb

    return _record("mul", out, (a, b), bwd)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}")

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", np.ascontiguousarray(out), (x,), bwd)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record("transpose", out, (x,), bwd)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.asarray(out), (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    shape = x.shape
    n = x.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _record("mean", np.asarray(out), (x,), bwd)


def absval(x):
    x = as_tensor(x)
    sign = np.sign(x.data)

    def bwd(g):
        return (g * sign,)

    return _record("abs", np.abs(x.data), (x,), bwd)


def square(x):
    x = as_tensor(x)
    xd = x.data

    def bwd(g):
        return (g * (2.0 * xd),)

    return _record("square", xd * xd, (x,), bwd)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} incompatible")
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ash) if need_a else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bsh) if need_b else None
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (x,), bwd)


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", out, (x,), bwd)


def softmax(x, axis):
    """Numerically stable softmax; slices along `axis` sum to 1."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        buf = g * out
        inner = buf.sum(axis=axis, keepdims=True)
        np.subtract(g, inner, out=buf)
        buf *= out
        return (buf,)

    return _record("softmax", out, (x,), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w, bias=None):
    """2-D convolution, k in {1,3}, stride 1, zero 'same' padding for k=3.

    x: BCHW, w: OutC x InC x k x k, bias: optional (OutC,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if bias is not None:
        bias = as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D x and w, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    OutC, InC, kh, kw = w.shape
    if kh != kw or kh not in (1, 3):
        raise DimensionError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if C != InC:
        raise DimensionError(
            f"conv2d: input has {C} channels (shape {x.shape}) but weights expect "
            f"{InC} (shape {w.shape})"
        )
    if bias is not None and bias.shape != (OutC,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({OutC},)")

    k = kh
    if k == 1:
        col = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        col = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    wmat = w.data.reshape(OutC, InC * k * k)
    out = col @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, H, W, OutC).transpose(0, 3, 1, 2))

    inputs = (x, w) if bias is None else (x, w, bias)
    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd(g):
        gcol = g.transpose(0, 2, 3, 1).reshape(B * H * W, OutC)
        gw = (gcol.T @ col).reshape(OutC, InC, k, k) if need_w else None
        gx = None
        if need_x:
            gx_col = gcol @ wmat
            if k == 1:
                gx = np.ascontiguousarray(
                    gx_col.reshape(B, H, W, C).transpose(0, 3, 1, 2)
                )
            else:
                gwin = gx_col.reshape(B, H, W, C, 3, 3)
                gxp = np.zeros((B, C, H + 2, W + 2))
                for i in range(3):
                    for j in range(3):
                        gxp[:, :, i : i + H, j : j + W] += gwin[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                gx = np.ascontiguousarray(gxp[:, :, 1 : 1 + H, 1 : 1 + W])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv2d", out, inputs, bwd)


def gap(x):
    """Global average pooling BCHW -> B x C x 1 x 1."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"gap: need BCHW input, got {x.shape}")
    return tmean(x, axis=(2, 3), keepdims=True)


def avg_pool2d(x, factor):
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise DimensionError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    h, w = H // factor, W // factor
    out = x.data.reshape(B, C, h, factor, w, factor).mean(axis=(3, 5))
    inv = 1.0 / (factor * factor)

    def bwd(g):
        g = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (g * inv,)

    return _record("avg_pool2d", out, (x,), bwd)


def upsample_nearest(x, factor):
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _record("upsample_nearest", out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention


def mhsa(x, heads, params, return_weights=False):
    """Multi-head self-attention over the HW spatial positions of BCHW input.

    `params` maps {q_w, q_b, k_w, k_b, v_w, v_b} with CxC weights. Head
    outputs are concatenated; there is no output projection, so with a single
    token the result is exactly the value projection of the input.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"mhsa: need BCHW input, got {x.shape}")
    B, C, H, W = x.shape
    if C % heads:
        raise ConfigError(f"mhsa: channels {C} not divisible by heads {heads}")
    d = C // heads
    n = H * W

    tok = transpose(reshape(x, (B, C, n)), (0, 2, 1))  # B,N,C
    q = add(matmul(tok, params["q_w"]), params["q_b"])
    k = add(matmul(tok, params["k_w"]), params["k_b"])
    v = add(matmul(tok, params["v_w"]), params["v_b"])

    def split(t):
        return transpose(reshape(t, (B, n, heads, d)), (0, 2, 1, 3))  # B,h,N,d

    # Scale q before the NxN product: same logits, one large tensor fewer.
    qh, kh, vh = split(mul(q, 1.0 / math.sqrt(d))), split(k), split(v)
    logits = matmul(qh, transpose(kh, (0, 1, 3, 2)))
    attn = softmax(logits, axis=-1)
    outh = matmul(attn, vh)  # B,h,N,d
    out = reshape(transpose(outh, (0, 2, 1, 3)), (B, n, C))
    out = reshape(transpose(out, (0, 2, 1)), (B, C, H, W))
    if return_weights:
        return out, attn
    return out
