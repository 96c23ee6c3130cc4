"""Differentiable primitives.

Shape rules are strict: except for the explicit broadcast_mul, operands must
conform exactly.  Violations raise ShapeError naming the operation and the
offending shapes; any non-finite output is rejected at construction.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor._wrap(out_data, op)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward)
    return out


def _require(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "add", f"shapes {a.shape} and {b.shape} differ")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "sub", f"shapes {a.shape} and {b.shape} differ")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _require(
        a.shape == b.shape,
        "elementwise_mul",
        f"shapes {a.shape} and {b.shape} differ",
    )
    ad, bd = a.data, b.data
    return _finish("elementwise_mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish("add_scalar", a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish("mul_scalar", a.data * s, (a,), lambda g: (g * s,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**p
    ad = a.data
    return _finish("pow_scalar", out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def clip_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    floor = float(floor)
    mask = a.data > floor
    return _finish("clip_min", np.maximum(a.data, floor), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _finish("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _finish("relu", a.data * mask, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("log: non-positive input")
    ad = a.data
    return _finish("log", y, (a,), lambda g: (g / ad,))


def softmax_lastdim(a: Tensor) -> Tensor:
    _require(a.ndim >= 1 and a.shape[-1] >= 1, "softmax_lastdim", f"needs a non-empty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _finish("softmax_lastdim", y, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions / shape


def _norm_axes(axis, ndim: int, op: str) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(a % ndim for a in axis))
    _require(len(set(axes)) == len(axes), op, f"duplicate axes {axis}")
    return axes


def sum_axis(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim, "sum_axis")
    out = a.data.sum(axis=axes)
    shape = a.shape

    def bwd(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, shape).copy(),)

    return _finish("sum_axis", out, (a,), bwd)


def mean_axis(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, a.ndim, "mean_axis")
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    _require(count > 0, "mean_axis", f"empty reduction over axes {axes} of {a.shape}")
    out = a.data.mean(axis=axes)
    shape = a.shape
    inv = 1.0 / count

    def bwd(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge * inv, shape).copy(),)

    return _finish("mean_axis", out, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {exc}") from None
    in_shape = a.shape
    return _finish("reshape", out.copy(), (a,), lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    _require(sorted(axes) == list(range(a.ndim)), "transpose", f"invalid axes {axes} for shape {a.shape}")
    inverse = np.argsort(axes)
    return _finish(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _require(len(tensors) >= 1, "concat", "needs at least one input")
    ndim = tensors[0].ndim
    axis = axis % ndim
    ref = list(tensors[0].shape)
    for t in tensors:
        other = list(t.shape)
        other[axis] = ref[axis]
        _require(
            t.ndim == ndim and other == ref,
            "concat",
            f"shapes {[t.shape for t in tensors]} differ off axis {axis}",
        )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _finish("concat", out, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis (reshape + concat)."""
    tensors = tuple(tensors)
    _require(len(tensors) >= 1, "stack", "needs at least one input")
    shape = tensors[0].shape
    for t in tensors:
        _require(t.shape == shape, "stack", f"shapes {[t.shape for t in tensors]} differ")
    axis = axis % (len(shape) + 1)
    new_shape = shape[:axis] + (1,) + shape[axis:]
    return concat([reshape(t, new_shape) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        _require(ad.shape[1] == bd.shape[0], "matmul", f"shapes {a.shape} @ {b.shape}")
        return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    if ad.ndim == 2 and bd.ndim == 1:
        _require(ad.shape[1] == bd.shape[0], "matmul", f"shapes {a.shape} @ {b.shape}")
        return _finish("matmul", ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")


def broadcast_mul(a: Tensor, b: Tensor, axes: Sequence[int]) -> Tensor:
    """Multiply a by b expanded along a's axes.

    b's shape must equal a's extents at the declared axes (ascending); all
    other axes of a are broadcast.  This is the single sanctioned broadcast.
    """
    axes = tuple(int(x) % a.ndim for x in axes)
    _require(sorted(axes) == list(axes) and len(set(axes)) == len(axes), "broadcast_mul", f"axes {axes} must be ascending and unique")
    expected = tuple(a.shape[ax] for ax in axes)
    _require(
        b.shape == expected,
        "broadcast_mul",
        f"weight shape {b.shape} != extents {expected} of {a.shape} at axes {axes}",
    )
    expand_shape = tuple(a.shape[i] if i in axes else 1 for i in range(a.ndim))
    be = b.data.reshape(expand_shape)
    ad = a.data
    other_axes = tuple(i for i in range(a.ndim) if i not in axes)

    def bwd(g):
        db = (g * ad).sum(axis=other_axes) if other_axes else (g * ad)
        return (g * be, db.reshape(b.shape))

    return _finish("broadcast_mul", ad * be, (a, b), bwd)


def l2_normalize_eps(v: Tensor, eps: float) -> Tensor:
    """v / sqrt(sum(v^2) + eps); finite even for the zero vector."""
    _require(v.ndim == 1, "l2_normalize_eps", f"expects a vector, got {v.shape}")
    if eps <= 0:
        raise ValueError("l2_normalize_eps: eps must be positive")
    vd = v.data
    s = np.sqrt(np.dot(vd, vd) + eps)
    y = vd / s

    def bwd(g):
        return (g / s - vd * (np.dot(vd, g) / s**3),)

    return _finish("l2_normalize_eps", y, (v,), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling


def _conv_out_len(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col2d(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int):
    cin, h, w = x.shape
    hp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    ho = _conv_out_len(h, kh, sh, ph)
    wo = _conv_out_len(w, kw, sw, pw)
    cols = np.empty((cin, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = hp[:, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(cin * kh * kw, ho * wo), ho, wo


def _col2im2d(cols: np.ndarray, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    cin, h, w = x_shape
    grad = np.zeros((cin, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    cols = cols.reshape(cin, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            grad[:, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols[:, i, j]
    return grad[:, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), padding=(1, 1)) -> Tensor:
    """2D convolution: x (Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout,)."""
    _require(x.ndim == 3 and w.ndim == 4, "conv2d", f"ranks {x.shape}, {w.shape}")
    _require(x.shape[0] == w.shape[1], "conv2d", f"channels {x.shape} vs kernel {w.shape}")
    sh, sw = stride
    ph, pw = padding
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col2d(x.data, kh, kw, sh, sw, ph, pw)
    _require(ho > 0 and wo > 0, "conv2d", f"input {x.shape} too small for kernel {w.shape}")
    wm = w.data.reshape(cout, cin * kh * kw)
    out = wm @ cols
    if b is not None:
        _require(b.shape == (cout,), "conv2d", f"bias {b.shape} vs {cout} channels")
        out = out + b.data[:, None]
    out = out.reshape(cout, ho, wo)
    x_shape = x.shape

    def bwd(g):
        gm = g.reshape(cout, ho * wo)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = wm.T @ gm
        dx = _col2im2d(dcols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo)
        if b is not None:
            return dx, dw, gm.sum(axis=1)
        return dx, dw

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv2d", out, inputs, bwd)


def _im2col3d(x: np.ndarray, k, s, p):
    cin, t, h, w = x.shape
    kt, kh, kw = k
    st, sh, sw = s
    pt, ph, pw = p
    xp = np.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    to = _conv_out_len(t, kt, st, pt)
    ho = _conv_out_len(h, kh, sh, ph)
    wo = _conv_out_len(w, kw, sw, pw)
    cols = np.empty((cin, kt, kh, kw, to, ho, wo), dtype=np.float64)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                cols[:, a, i, j] = xp[
                    :,
                    a : a + st * to : st,
                    i : i + sh * ho : sh,
                    j : j + sw * wo : sw,
                ]
    return cols.reshape(cin * kt * kh * kw, to * ho * wo), to, ho, wo


def _col2im3d(cols, x_shape, k, s, p, outs):
    cin, t, h, w = x_shape
    kt, kh, kw = k
    st, sh, sw = s
    pt, ph, pw = p
    to, ho, wo = outs
    grad = np.zeros((cin, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    cols = cols.reshape(cin, kt, kh, kw, to, ho, wo)
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                grad[
                    :,
                    a : a + st * to : st,
                    i : i + sh * ho : sh,
                    j : j + sw * wo : sw,
                ] += cols[:, a, i, j]
    return grad[:, pt : pt + t, ph : ph + h, pw : pw + w]


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1, 1), padding=(1, 1, 1)) -> Tensor:
    """3D convolution: x (Cin,T,H,W), w (Cout,Cin,kt,kh,kw), optional bias."""
    _require(x.ndim == 4 and w.ndim == 5, "conv3d", f"ranks {x.shape}, {w.shape}")
    _require(x.shape[0] == w.shape[1], "conv3d", f"channels {x.shape} vs kernel {w.shape}")
    cout = w.shape[0]
    k = w.shape[2:]
    cols, to, ho, wo = _im2col3d(x.data, k, stride, padding)
    _require(to > 0 and ho > 0 and wo > 0, "conv3d", f"input {x.shape} too small for kernel {w.shape}")
    wm = w.data.reshape(cout, -1)
    out = wm @ cols
    if b is not None:
        _require(b.shape == (cout,), "conv3d", f"bias {b.shape} vs {cout} channels")
        out = out + b.data[:, None]
    out = out.reshape(cout, to, ho, wo)
    x_shape = x.shape

    def bwd(g):
        gm = g.reshape(cout, -1)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = wm.T @ gm
        dx = _col2im3d(dcols, x_shape, k, stride, padding, (to, ho, wo))
        if b is not None:
            return dx, dw, gm.sum(axis=1)
        return dx, dw

    inputs = (x, w) if b is None else (x, w, b)
    return _finish("conv3d", out, inputs, bwd)


def avg_pool3d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling over (T,H,W); trailing remainders drop."""
    _require(x.ndim == 4, "avg_pool3d", f"expects (C,T,H,W), got {x.shape}")
    c, t, h, w = x.shape
    s = int(size)
    to, ho, wo = t // s, h // s, w // s
    _require(to > 0 and ho > 0 and wo > 0, "avg_pool3d", f"input {x.shape} smaller than window {s}")
    trimmed = x.data[:, : to * s, : ho * s, : wo * s]
    blocks = trimmed.reshape(c, to, s, ho, s, wo, s)
    out = blocks.mean(axis=(2, 4, 6))
    inv = 1.0 / s**3

    def bwd(g):
        dx = np.zeros((c, t, h, w), dtype=np.float64)
        spread = np.broadcast_to(
            g[:, :, None, :, None, :, None] * inv, (c, to, s, ho, s, wo, s)
        )
        dx[:, : to * s, : ho * s, : wo * s] = spread.reshape(c, to * s, ho * s, wo * s)
        return (dx,)

    return _finish("avg_pool3d", out, (x,), bwd)


# ---------------------------------------------------------------------------
# stochastic mask (training only)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout: training mode needs a seeded generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return elementwise_mul(x, constant(mask))


# ---------------------------------------------------------------------------
# dispatcher

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "neg": neg,
    "elementwise_mul": elementwise_mul,
    "add_scalar": add_scalar,
    "mul_scalar": mul_scalar,
    "pow_scalar": pow_scalar,
    "clip_min": clip_min,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "log": log,
    "softmax_lastdim": softmax_lastdim,
    "sum_axis": sum_axis,
    "mean_axis": mean_axis,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "avg_pool3d": avg_pool3d,
    "l2_normalize_eps": l2_normalize_eps,
    "broadcast_mul": broadcast_mul,
}

_VARIADIC = {"concat"}


def primitive_forward(op: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Apply a primitive by name to a list of input tensors."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise KeyError(f"unknown primitive {op!r}")
    if op in _VARIADIC:
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)
