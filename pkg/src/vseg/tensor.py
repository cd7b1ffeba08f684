"""Dense float64 tensors with recorded operations and reverse-mode gradients.

Every operation here computes its forward value eagerly with numpy and, when
any input participates in differentiation, records a backward rule on the
output node. Calling ``backward`` on a scalar result replays those rules in
reverse topological order and accumulates ``d(root)/d(leaf)`` into each leaf's
``grad`` buffer (repeated calls accumulate; ``zero_grad`` resets).

All data is 64-bit IEEE-754: the toolkit's correctness story rests on
finite-difference gradient checks, which are only meaningful at full
precision. Canonical layout for volumetric data is five axes:
batch x channels x slices x height x width.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "backward",
    "channel_softmax",
    "clamp",
    "concat_channels",
    "conv3d",
    "conv_transpose3d",
    "dense",
    "global_avg_pool3d",
    "leaky_relu",
    "log",
    "max_pool3d",
    "reshape",
    "scale_channels",
    "sigmoid",
    "softmax",
    "tsum",
]

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (pure inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array, optionally tracked for reverse-mode gradients.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialized
    ``grad`` buffer of identical shape. Tensors produced by recorded ops are
    interior graph nodes; their gradients are transient to each backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape, default=1) < 1:
            raise ValueError(f"tensor shape entries must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None

    @classmethod
    def _node(cls, data, parents, backward_fn):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = True
        t.grad = None
        t._parents = tuple(parents)
        t._backward = backward_fn
        return t

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- fluent wrappers ----------------------------------------------------

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return _neg(self)

    def __sub__(self, other):
        return add(self, _neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other), self)

    def __pow__(self, exponent):
        return _pow_const(self, exponent)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor._node(data, parents, backward_fn)
    return Tensor(data)


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into every reachable requires_grad leaf.

    The root must be scalar. Interior gradients live only for the duration of
    the call, so repeated invocations on the same graph add another full
    contribution to each leaf (call ``zero_grad`` between steps to reset).
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else held + pg


# -- elementwise arithmetic ---------------------------------------------------


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Collapse a gradient back onto a scalar (size-1) operand.
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    """Elementwise sum; operands must share a shape (either may be scalar)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), bw)


def _neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def _mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _reduce_to(g / b.data, a.shape)
        gb = _reduce_to(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def _pow_const(a: Tensor, p) -> Tensor:
    p = float(p)
    if p == 1.0:
        return _make(a.data.copy(), (a,), lambda g: (g,))
    out = a.data**p

    def bw(g):
        # Fractional powers have an infinite slope at 0; use subgradient 0
        # there so exactly-perfect scores do not poison the whole gradient.
        base = np.where(a.data != 0.0, a.data, 1.0)
        d = np.where(a.data != 0.0, p * base ** (p - 1.0), 0.0)
        return (g * d,)

    return _make(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    """Natural logarithm; callers clamp away from 0 first."""
    a = _as_tensor(a)
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes wherever the input was in range."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * inside,))


def tsum(a: Tensor, axis=None) -> Tensor:
    """Sum over the given axis (or all axes), with gradient broadcast back."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        g_keep = np.expand_dims(g, axes)
        return (np.broadcast_to(g_keep, a.shape),)

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


# -- activations ----------------------------------------------------------------


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    """x for x >= 0, slope*x otherwise."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = _as_tensor(a)
    pos = a.data >= 0.0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (g * np.where(pos, 1.0, slope),))


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic function 1/(1+exp(-x))."""
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Probabilities along ``axis`` via max-subtracted exponentials."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (p * g).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (a,), bw)


def channel_softmax(a: Tensor) -> Tensor:
    """Per-voxel class probabilities over the channel axis of a 5-D tensor."""
    a = _as_tensor(a)
    if a.ndim != 5:
        raise ValueError(f"channel_softmax expects a 5-D tensor, got {a.shape}")
    if a.shape[1] < 2:
        raise ValueError(f"channel_softmax needs >= 2 channels, got {a.shape[1]}")
    return softmax(a, axis=1)


# -- linear / structural ops -------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map W x + b for batched row vectors: [B,Din] -> [B,Dout]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError(
            f"dense expects x[B,Din], weight[Dout,Din], bias[Dout]; got "
            f"{x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"dense: input width {x.shape[1]} does not match weight Din {weight.shape[1]}"
        )
    if bias.shape[0] != weight.shape[0]:
        raise ValueError(
            f"dense: bias width {bias.shape[0]} does not match weight Dout {weight.shape[0]}"
        )
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1); other dims must agree."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 2:
        raise ValueError(f"concat_channels: ranks {a.ndim} and {b.ndim} differ")
    for ax in range(a.ndim):
        if ax != 1 and a.shape[ax] != b.shape[ax]:
            raise ValueError(
                f"concat_channels: axis {ax} sizes differ ({a.shape} vs {b.shape})"
            )
    ka = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bw(g):
        return g[:, :ka], g[:, ka:]

    return _make(out, (a, b), bw)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of x[B,K,S,H,W] by the matching entry of s[B,K]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.ndim != 5 or s.ndim != 2 or x.shape[:2] != s.shape:
        raise ValueError(
            f"scale_channels: expected x[B,K,S,H,W] with s[B,K], got {x.shape} and {s.shape}"
        )
    sb = s.data[:, :, None, None, None]
    out = x.data * sb

    def bw(g):
        gx = g * sb if x.requires_grad else None
        gs = (g * x.data).sum(axis=(2, 3, 4)) if s.requires_grad else None
        return gx, gs

    return _make(out, (x, s), bw)


def global_avg_pool3d(x: Tensor) -> Tensor:
    """Average each channel over its full spatial extent: [B,K,S,H,W] -> [B,K]."""
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool3d expects a 5-D tensor, got {x.shape}")
    _, _, s, h, w = x.shape
    out = x.data.mean(axis=(2, 3, 4))
    inv = 1.0 / (s * h * w)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None, None] * inv, x.shape),)

    return _make(out, (x,), bw)


# -- 3-D convolution kernels ----------------------------------------------------
#
# All three computational kernels enumerate the kd*kh*kw kernel offsets and
# contract channels with one GEMM per offset over strided views of the padded
# volume. That keeps peak memory at O(input + output) instead of the k^3
# blowup of a full im2col buffer, and makes _scatter3d the exact adjoint of
# _corr3d by construction (same views, transposed contraction).


def _triple(v, name) -> tuple:
    if isinstance(v, (tuple, list)):
        t = tuple(int(e) for e in v)
        if len(t) != 3:
            raise ValueError(f"{name} must be an int or a triple, got {v}")
        return t
    return (int(v),) * 3


def _conv_out_dims(spatial, kshape, stride, pad, op):
    out = []
    for name, size, k, s, p in zip("SHW", spatial, kshape, stride, pad):
        if s < 1:
            raise ValueError(f"{op}: stride along {name} must be >= 1, got {s}")
        if p < 0:
            raise ValueError(f"{op}: padding along {name} must be >= 0, got {p}")
        o = (size + 2 * p - k) // s + 1
        if o < 1:
            raise ValueError(
                f"{op}: output axis {name} is empty "
                f"(size {size}, kernel {k}, stride {s}, pad {p})"
            )
        out.append(o)
    return tuple(out)


def _pad5(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    pd, ph, pw = pad
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def _offset_view(xp: np.ndarray, i, j, k, stride, out_spatial):
    sd, sh, sw = stride
    so, ho, wo = out_spatial
    return xp[
        :,
        :,
        i : i + sd * (so - 1) + 1 : sd,
        j : j + sh * (ho - 1) + 1 : sh,
        k : k + sw * (wo - 1) + 1 : sw,
    ]


def _corr3d(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    b = x.shape[0]
    co, _, kd, kh, kw = w.shape
    out_sp = tuple(
        (x.shape[2 + a] + 2 * pad[a] - w.shape[2 + a]) // stride[a] + 1 for a in range(3)
    )
    xp = _pad5(x, pad)
    acc = np.zeros((co, b) + out_sp)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                v = _offset_view(xp, i, j, k, stride, out_sp)
                acc += np.tensordot(w[:, :, i, j, k], v, axes=(1, 1))
    return np.ascontiguousarray(np.moveaxis(acc, 1, 0))


def _scatter3d(y: np.ndarray, w: np.ndarray, stride, pad, out_spatial) -> np.ndarray:
    # Exact adjoint of _corr3d's linear map, accumulating into the padded grid.
    b = y.shape[0]
    _, ci, kd, kh, kw = w.shape
    pd, ph, pw = pad
    s, h, wd = out_spatial
    xp = np.zeros((b, ci, s + 2 * pd, h + 2 * ph, wd + 2 * pw))
    y_sp = y.shape[2:]
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                d = np.tensordot(w[:, :, i, j, k], y, axes=(0, 1))
                _offset_view(xp, i, j, k, stride, y_sp)[...] += np.moveaxis(d, 1, 0)
    if not any(pad):
        return xp
    return xp[:, :, pd : pd + s, ph : ph + h, pw : pw + wd]


def _wgrad3d(x: np.ndarray, dy: np.ndarray, stride, pad, kshape) -> np.ndarray:
    kd, kh, kw = kshape
    co = dy.shape[1]
    ci = x.shape[1]
    xp = _pad5(x, pad)
    out_sp = dy.shape[2:]
    dw = np.empty((co, ci, kd, kh, kw))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                v = _offset_view(xp, i, j, k, stride, out_sp)
                dw[:, :, i, j, k] = np.tensordot(dy, v, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return dw


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Strided cross-correlation of x[B,Kin,S,H,W] with weight[Kout,Kin,kd,kh,kw].

    Output spatial extent is floor((size + 2*pad - kernel)/stride) + 1 per axis.
    The backward rule yields exact gradients for the input, weight and bias.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input/weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d: input channels Kin={x.shape[1]} do not match weight Kin={weight.shape[1]}"
        )
    if bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise ValueError(
            f"conv3d: bias shape {bias.shape} does not match Kout={weight.shape[0]}"
        )
    kshape = weight.shape[2:]
    _conv_out_dims(x.shape[2:], kshape, stride, padding, "conv3d")

    out = _corr3d(x.data, weight.data, stride, padding)
    out += bias.data[None, :, None, None, None]

    def bw(g):
        gx = (
            _scatter3d(g, weight.data, stride, padding, x.shape[2:])
            if x.requires_grad
            else None
        )
        gw = _wgrad3d(x.data, g, stride, padding, kshape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """Transposed convolution: the exact adjoint of conv3d's linear map.

    Takes x[B,K1,S,H,W] and weight[K1,K2,kd,kh,kw] to [B,K2,S',H',W'] with
    S' = (S-1)*stride - 2*pad + kd. Feeding conv3d's weight here realizes
    <conv3d(u), v> == <u, conv_transpose3d(v)> for matching geometry.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    stride, padding = _triple(stride, "stride"), _triple(padding, "padding")
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(
            f"conv_transpose3d expects 5-D input/weight, got {x.shape}, {weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"conv_transpose3d: input channels K1={x.shape[1]} do not match "
            f"weight axis 0 K1={weight.shape[0]}"
        )
    if bias.ndim != 1 or bias.shape[0] != weight.shape[1]:
        raise ValueError(
            f"conv_transpose3d: bias shape {bias.shape} does not match K2={weight.shape[1]}"
        )
    kshape = weight.shape[2:]
    out_sp = []
    for name, size, k, s, p in zip("SHW", x.shape[2:], kshape, stride, padding):
        o = (size - 1) * s - 2 * p + k
        if o < 1:
            raise ValueError(
                f"conv_transpose3d: output axis {name} is empty "
                f"(size {size}, kernel {k}, stride {s}, pad {p})"
            )
        out_sp.append(o)
    out_sp = tuple(out_sp)

    out = _scatter3d(x.data, weight.data, stride, padding, out_sp)
    out += bias.data[None, :, None, None, None]

    def bw(g):
        gx = _corr3d(g, weight.data, stride, padding) if x.requires_grad else None
        gw = _wgrad3d(g, x.data, stride, padding, kshape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw)


def max_pool3d(x: Tensor, kernel=2, stride=None) -> Tensor:
    """Windowed maximum over [B,K,S,H,W]; gradient routes to each window's argmax."""
    x = _as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"max_pool3d expects a 5-D tensor, got {x.shape}")
    kshape = _triple(kernel, "kernel")
    stride = kshape if stride is None else _triple(stride, "stride")
    out_sp = _conv_out_dims(x.shape[2:], kshape, stride, (0, 0, 0), "max_pool3d")
    kd, kh, kw = kshape

    views = []
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                views.append(_offset_view(x.data, i, j, k, stride, out_sp))
    stacked = np.stack(views)
    winner = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, winner[None], axis=0)[0]

    def bw(g):
        gx = np.zeros_like(x.data)
        m = 0
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    _offset_view(gx, i, j, k, stride, out_sp)[...] += g * (winner == m)
                    m += 1
        return (gx,)

    return _make(out, (x,), bw)
