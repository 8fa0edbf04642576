"""Tensor operations: a small primitive set plus composed layers.

Primitives keep hand-verified adjoints; everything else (conv2d, layer
normalization, log-softmax, ...) is composed from them.  Adjoints are
written with tensor ops, never raw numpy, so every gradient is again a
differentiable node (double backward works throughout).

Convolution is expressed as unfold -> matmul -> reshape.  unfold/fold are
mutual adjoints as linear maps, which makes the convolution family exact to
all orders without bespoke backward kernels.
"""

from __future__ import annotations

import numpy as np

from .tensor import OPS, ShapeMismatchError, Tensor, apply_op, register_op


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.dtype))


def as_tensor(value, ref: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if ref is not None:
        return _const_like(value, ref)
    return Tensor(value)


# -- elementwise primitives ---------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


register_op(
    "add",
    lambda attrs, a, b: np.add(a, b),
    lambda node, g: (
        _unbroadcast(g, node.parents[0].shape),
        _unbroadcast(g, node.parents[1].shape),
    ),
)

register_op(
    "mul",
    lambda attrs, a, b: np.multiply(a, b),
    lambda node, g: (
        _unbroadcast(mul(g, node.parents[1]), node.parents[0].shape),
        _unbroadcast(mul(g, node.parents[0]), node.parents[1].shape),
    ),
)


def _pow_forward(attrs, x):
    return np.power(x, attrs["exponent"])


def _pow_vjp(node, g):
    x = node.parents[0]
    c = node.attrs["exponent"]
    return (mul(mul(g, _const_like(c, x)), pow_const(x, c - 1.0)),)


register_op("pow_const", _pow_forward, _pow_vjp)

register_op(
    "exp",
    lambda attrs, x: np.exp(x),
    lambda node, g: (mul(g, node),),
)

register_op(
    "log",
    lambda attrs, x: np.log(x),
    lambda node, g: (mul(g, pow_const(node.parents[0], -1.0)),),
)


def _relu_vjp(node, g):
    mask = Tensor((node.parents[0].data > 0).astype(node.parents[0].dtype))
    return (mul(g, mask),)


register_op("relu", lambda attrs, x: np.maximum(x, 0), _relu_vjp)


def _softmax_forward(attrs, x):
    axis = attrs["axis"]
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(node, g):
    axis = node.attrs["axis"]
    inner = sum_(mul(g, node), axis=axis, keepdims=True)
    return (mul(node, sub(g, inner)),)


register_op("softmax", _softmax_forward, _softmax_vjp)


def _sum_forward(attrs, x):
    return np.sum(x, axis=attrs["axis"], keepdims=attrs["keepdims"], dtype=x.dtype)


def _sum_vjp(node, g):
    x = node.parents[0]
    axis = node.attrs["axis"]
    if not node.attrs["keepdims"] and x.ndim > 0:
        kept = list(x.shape)
        axes = range(x.ndim) if axis is None else (
            axis if isinstance(axis, tuple) else (axis,)
        )
        for a in axes:
            kept[a % x.ndim] = 1
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, x.shape),)


register_op("sum", _sum_forward, _sum_vjp)


def _broadcast_forward(attrs, x):
    return np.broadcast_to(x, attrs["shape"])


def _broadcast_vjp(node, g):
    return (_unbroadcast(g, node.parents[0].shape),)


register_op("broadcast_to", _broadcast_forward, _broadcast_vjp)


def _cumsum_forward(attrs, x):
    return np.cumsum(x, axis=attrs["axis"], dtype=x.dtype)


def _cumsum_vjp(node, g):
    return (revcumsum(g, node.attrs["axis"]),)


register_op("cumsum", _cumsum_forward, _cumsum_vjp)


def _revcumsum_forward(attrs, x):
    axis = attrs["axis"]
    flipped = np.flip(x, axis=axis)
    return np.flip(np.cumsum(flipped, axis=axis, dtype=x.dtype), axis=axis)


def _revcumsum_vjp(node, g):
    return (cumsum(g, node.attrs["axis"]),)


register_op("revcumsum", _revcumsum_forward, _revcumsum_vjp)


# -- linear-algebra primitives ------------------------------------------------


def _matmul_forward(attrs, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    # Either equal batch dims, or one operand is a plain matrix broadcast
    # over the other's batch.
    if a.ndim != b.ndim and a.ndim != 2 and b.ndim != 2:
        raise ValueError(f"matmul batch ranks differ: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(
            f"matmul batch dims must match exactly, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def _matmul_vjp(node, g):
    a, b = node.parents
    ga = matmul(g, _swap_last(b))
    gb = matmul(_swap_last(a), g)
    # If one operand was broadcast over batch dims, its gradient sums them.
    if ga.shape != a.shape:
        ga = sum_(ga, axis=tuple(range(ga.ndim - a.ndim)))
    if gb.shape != b.shape:
        gb = sum_(gb, axis=tuple(range(gb.ndim - b.ndim)))
    return (ga, gb)


register_op("matmul", _matmul_forward, _matmul_vjp)


def _transpose_forward(attrs, x):
    return np.transpose(x, attrs["axes"])


def _transpose_vjp(node, g):
    inverse = tuple(np.argsort(node.attrs["axes"]))
    return (transpose(g, inverse),)


register_op("transpose", _transpose_forward, _transpose_vjp)

register_op(
    "reshape",
    lambda attrs, x: np.reshape(x, attrs["shape"]),
    lambda node, g: (reshape(g, node.parents[0].shape),),
)


def _concat_forward(attrs, *parts):
    return np.concatenate(parts, axis=attrs["axis"])


def _concat_vjp(node, g):
    axis = node.attrs["axis"]
    grads = []
    start = 0
    for p in node.parents:
        width = p.shape[axis]
        key = [slice(None)] * g.ndim
        key[axis] = slice(start, start + width)
        grads.append(slice_(g, tuple(key)))
        start += width
    return tuple(grads)


register_op("concat", _concat_forward, _concat_vjp)


def _normalize_key(key) -> tuple:
    return tuple(
        (k.start, k.stop, k.step) if isinstance(k, slice) else k for k in key
    )


def _denormalize_key(key) -> tuple:
    return tuple(slice(*k) if isinstance(k, tuple) else k for k in key)


def _slice_forward(attrs, x):
    return np.ascontiguousarray(x[_denormalize_key(attrs["key"])])


def _slice_vjp(node, g):
    return (unslice(g, node.parents[0].shape, _denormalize_key(node.attrs["key"])),)


register_op("slice", _slice_forward, _slice_vjp)


def _unslice_forward(attrs, g):
    out = np.zeros(attrs["shape"], dtype=g.dtype)
    out[_denormalize_key(attrs["key"])] = g
    return out


def _unslice_vjp(node, g):
    return (slice_(g, _denormalize_key(node.attrs["key"])),)


register_op("unslice", _unslice_forward, _unslice_vjp)


# -- window gather/scatter (convolution building blocks) ----------------------


def _unfold_forward(attrs, x):
    kh, kw = attrs["kernel"]
    sh, sw = attrs["stride"]
    if x.ndim not in (3, 4):
        raise ValueError(f"unfold expects (B,)CxHxW input, got shape {x.shape}")
    h, w = x.shape[-2:]
    if kh > h or kw > w:
        raise ValueError(f"window {kh}x{kw} larger than input {h}x{w}")
    if x.ndim == 3:
        c = x.shape[0]
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        win = win[:, ::sh, ::sw]
        oh, ow = win.shape[1], win.shape[2]
        return np.ascontiguousarray(
            win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
        )
    b, c = x.shape[0], x.shape[1]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    oh, ow = win.shape[2], win.shape[3]
    return np.ascontiguousarray(
        win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    )


def _unfold_vjp(node, g):
    return (
        fold(g, node.parents[0].shape, node.attrs["kernel"], node.attrs["stride"]),
    )


register_op("unfold", _unfold_forward, _unfold_vjp)


def _fold_forward(attrs, cols):
    shape = attrs["shape"]
    kh, kw = attrs["kernel"]
    sh, sw = attrs["stride"]
    c, h, w = shape[-3:]
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if len(shape) == 3:
        expect = (c * kh * kw, oh * ow)
    else:
        expect = (shape[0], c * kh * kw, oh * ow)
    if cols.shape != expect:
        raise ValueError(f"fold expects columns of shape {expect}, got {cols.shape}")
    blocks = cols.reshape(shape[:-3] + (c, kh, kw, oh, ow))
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[..., i : i + sh * oh : sh, j : j + sw * ow : sw] += blocks[..., i, j, :, :]
    return out


def _fold_vjp(node, g):
    return (unfold(g, node.attrs["kernel"], node.attrs["stride"]),)


register_op("fold", _fold_forward, _fold_vjp)


def _embed_forward(attrs, table):
    ids = attrs["ids"]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}"
        )
    return table[ids]


def _embed_vjp(node, g):
    return (scatter_rows(g, node.attrs["ids"], node.parents[0].shape[0]),)


register_op("embed", _embed_forward, _embed_vjp)


def _scatter_rows_forward(attrs, rows):
    ids = attrs["ids"]
    out = np.zeros((attrs["num_rows"],) + rows.shape[ids.ndim :], dtype=rows.dtype)
    np.add.at(out, ids, rows)
    return out


def _scatter_rows_vjp(node, g):
    return (embed_rows(g, node.attrs["ids"]),)


register_op("scatter_rows", _scatter_rows_forward, _scatter_rows_vjp)


# -- primitive wrappers --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    return apply_op("add", (a, as_tensor(b, a)))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    return apply_op("mul", (a, as_tensor(b, a)))


def pow_const(x: Tensor, exponent: float) -> Tensor:
    return apply_op("pow_const", (x,), {"exponent": float(exponent)})


def exp(x: Tensor) -> Tensor:
    return apply_op("exp", (x,))


def log(x: Tensor) -> Tensor:
    return apply_op("log", (x,))


def relu(x: Tensor) -> Tensor:
    return apply_op("relu", (x,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_op("softmax", (x,), {"axis": axis})


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return apply_op("sum", (x,), {"axis": axis, "keepdims": keepdims})


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_op("matmul", (a, b))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return apply_op("broadcast_to", (x,), {"shape": tuple(shape)})


def cumsum(x: Tensor, axis: int) -> Tensor:
    return apply_op("cumsum", (x,), {"axis": axis})


def revcumsum(x: Tensor, axis: int) -> Tensor:
    return apply_op("revcumsum", (x,), {"axis": axis})


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    return apply_op("transpose", (x,), {"axes": tuple(axes)})


def reshape(x: Tensor, shape) -> Tensor:
    return apply_op("reshape", (x,), {"shape": tuple(int(s) for s in shape)})


def concat(parts, axis: int = 0) -> Tensor:
    return apply_op("concat", tuple(parts), {"axis": axis})


def slice_(x: Tensor, key) -> Tensor:
    return apply_op("slice", (x,), {"key": _normalize_key(key)})


def unslice(g: Tensor, shape, key) -> Tensor:
    return apply_op(
        "unslice", (g,), {"shape": tuple(shape), "key": _normalize_key(key)}
    )


def unfold(x: Tensor, kernel, stride) -> Tensor:
    return apply_op("unfold", (x,), {"kernel": tuple(kernel), "stride": tuple(stride)})


def fold(cols: Tensor, shape, kernel, stride) -> Tensor:
    return apply_op(
        "fold",
        (cols,),
        {"shape": tuple(shape), "kernel": tuple(kernel), "stride": tuple(stride)},
    )


def embed_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return apply_op("embed", (table,), {"ids": ids})


def scatter_rows(rows: Tensor, ids, num_rows: int) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return apply_op("scatter_rows", (rows,), {"ids": ids, "num_rows": int(num_rows)})


# -- composed operations -------------------------------------------------------


def neg(x: Tensor) -> Tensor:
    return mul(x, _const_like(-1.0, x))


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    return add(a, neg(as_tensor(b, a)))


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    return mul(a, pow_const(as_tensor(b, a), -1.0))


def sqrt(x: Tensor) -> Tensor:
    return pow_const(x, 0.5)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(x, axis=axis, keepdims=keepdims), _const_like(1.0 / total, x))


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance E[x^2] - E[x]^2."""
    m = mean(x, axis=axis, keepdims=True)
    v = sub(mean(square(x), axis=axis, keepdims=True), square(m))
    if not keepdims:
        v = _drop_axes(v, x, axis)
    return v


def _drop_axes(v: Tensor, ref: Tensor, axis) -> Tensor:
    if axis is None:
        return reshape(v, ())
    axes = axis if isinstance(axis, tuple) else (axis,)
    kept = [s for i, s in enumerate(ref.shape) if i not in [a % ref.ndim for a in axes]]
    return reshape(v, tuple(kept))


def sigmoid(x: Tensor) -> Tensor:
    # 1 / (1 + e^{-x}); |x| is clipped upstream only by the finite check.
    return pow_const(add(exp(neg(x)), _const_like(1.0, x)), -1.0)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine-transform."""
    mu = mean(x, axis=-1, keepdims=True)
    var = variance(x, axis=-1, keepdims=True)
    inv = pow_const(add(var, _const_like(eps, x)), -0.5)
    return add(mul(mul(sub(x, mu), inv), gain), bias)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    shifted = sub(x, shift)
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is a recorded constant, so replay is exact."""
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
    return mul(x, Tensor(mask))


def pad2d(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing spatial axes."""
    if padding == 0:
        return x
    h, w = x.shape[-2:]
    p = padding
    lead = tuple(slice(0, s) for s in x.shape[:-2])
    key = lead + (slice(p, p + h), slice(p, p + w))
    return unslice(x, x.shape[:-2] + (h + 2 * p, w + 2 * p), key)


def _as_chw(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeMismatchError(f"expected HxW or CxHxW input, got shape {x.shape}")


def _as_ocikk(kernel: Tensor, c_in: int) -> tuple[Tensor, bool]:
    if kernel.ndim == 2:
        if c_in != 1:
            raise ShapeMismatchError(
                f"2-d kernel requires single-channel input, got {c_in} channels"
            )
        return reshape(kernel, (1, 1) + kernel.shape), True
    if kernel.ndim == 4:
        return kernel, False
    raise ShapeMismatchError(f"expected khxkw or OCxCxkhxkw kernel, got {kernel.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation; output size floor((in + 2p - k)/s) + 1 per axis.

    Accepts HxW, CxHxW or batched BxCxHxW input.
    """
    batched = x.ndim == 4
    if batched:
        xc, squeeze_x = x, False
    else:
        xc, squeeze_x = _as_chw(x)
    c_dim = xc.shape[1] if batched else xc.shape[0]
    kc, squeeze_k = _as_ocikk(kernel, c_dim)
    oc, c_in, kh, kw = kc.shape
    if c_in != c_dim:
        raise ShapeMismatchError(
            f"kernel expects {c_in} input channels, image has {c_dim}"
        )
    h, w = xc.shape[-2:]
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = unfold(pad2d(xc, padding), (kh, kw), (stride, stride))
    km = reshape(kc, (oc, c_in * kh * kw))
    out = matmul(km, cols)  # (oc, L) or (B, oc, L) by broadcast
    out_shape = (xc.shape[0], oc, oh, ow) if batched else (oc, oh, ow)
    out = reshape(out, out_shape)
    if squeeze_x and squeeze_k:
        return reshape(out, (oh, ow))
    return out


def conv2d_transpose(
    x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d: kernel is C_inxOCxkhxkw, output (h-1)*s - 2p + k.

    Accepts CxHxW or batched BxCxHxW input.
    """
    batched = x.ndim == 4
    c_in, oc, kh, kw = kernel.shape
    c_dim = x.shape[1] if batched else x.shape[0]
    if c_dim != c_in:
        raise ShapeMismatchError(
            f"kernel expects {c_in} input channels, feature map has {c_dim}"
        )
    h, w = x.shape[-2:]
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    km = reshape(kernel, (c_in, oc * kh * kw))
    flat = reshape(x, (x.shape[0], c_in, h * w) if batched else (c_in, h * w))
    cols = matmul(transpose(km, (1, 0)), flat)
    full_shape = (x.shape[0], oc, hp, wp) if batched else (oc, hp, wp)
    full = fold(cols, full_shape, (kh, kw), (stride, stride))
    if padding == 0:
        return full
    p = padding
    lead = tuple(slice(0, s) for s in full_shape[:-2])
    key = lead + (slice(p, hp - p), slice(p, wp - p))
    return slice_(full, key)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def window_sum2d(x: Tensor, window: int) -> Tensor:
    """Sliding-window sums over the two trailing axes via an integral image.

    Output spatial size is (H - window + 1, W - window + 1); cost is O(HW)
    independent of the window size.
    """
    h, w = x.shape[-2:]
    if window > h or window > w:
        raise ShapeMismatchError(f"window {window} larger than input {h}x{w}")
    integral = cumsum(cumsum(x, axis=-1), axis=-2)
    lead = x.shape[:-2]
    lead_key = tuple(slice(0, s) for s in lead)
    padded = unslice(
        integral,
        lead + (h + 1, w + 1),
        lead_key + (slice(1, h + 1), slice(1, w + 1)),
    )
    k = window

    def corner(rs, cs):
        return slice_(padded, lead_key + (rs, cs))

    a = corner(slice(k, h + 1), slice(k, w + 1))
    b = corner(slice(0, h + 1 - k), slice(k, w + 1))
    c = corner(slice(k, h + 1), slice(0, w + 1 - k))
    d = corner(slice(0, h + 1 - k), slice(0, w + 1 - k))
    return add(sub(sub(a, b), c), d)


def onehot(ids, depth: int, dtype=np.float32) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    table = np.zeros((ids.size, depth), dtype=dtype)
    table[np.arange(ids.size), ids] = 1.0
    return Tensor(table)


def cross_entropy_logits(logits: Tensor, target_ids) -> Tensor:
    """Sum over steps of -log softmax(logits)[t, target_t]."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != target_ids.size:
        raise ShapeMismatchError(
            f"expected ({target_ids.size}, vocab) logits, got {tuple(logits.shape)}"
        )
    picks = mul(log_softmax(logits, axis=-1), onehot(target_ids, logits.shape[1], logits.dtype))
    return neg(sum_(picks))


# -- operator sugar ------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(self, other)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(self, other)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: add(neg(self), as_tensor(other, self))
Tensor.__neg__ = lambda self: neg(self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.__pow__ = lambda self, other: pow_const(self, other)
