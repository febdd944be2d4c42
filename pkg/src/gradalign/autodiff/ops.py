"""Differentiable operations.

Backward rules only use functions from this module, never raw numpy on
tensors that may carry history, so that they can be differentiated again.
Constant masks (relu, max-pool routing) are wrapped as
untracked tensors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, grad, make_result, set_grad_enabled

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sigmoid", "softplus", "relu", "matmul", "dot",
    "transpose", "reshape", "flatten", "sum", "mean", "broadcast_to", "sum_to",
    "getitem", "concat", "l2norm", "logsumexp", "log_softmax", "softmax",
    "im2col", "col2im", "conv2d", "maxpool2d", "gather_flat", "scatter_flat",
    "dense", "forward_op", "hessian_vector_product",
]


def _const(a) -> Tensor:
    return as_tensor(a)


# -- broadcasting helpers ------------------------------------------------------


def _reduce_to(arr: np.ndarray, shape: tuple) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {arr.shape} to {shape}")
    out = arr.sum(axis=tuple(range(lead))) if lead else arr
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {arr.shape} to {shape}")
    return out


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def bw(g, needs):
        return (broadcast_to(g, a.shape),)

    return make_result(_reduce_to(a.data, shape), "sum_to", (a,), bw)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc

    def bw(g, needs):
        return (sum_to(g, a.shape),)

    return make_result(data, "broadcast_to", (a,), bw)


def _binary_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _binary_shape("add", a, b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return make_result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _binary_shape("sub", a, b)

    def bw(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return make_result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _binary_shape("mul", a, b)

    def bw(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return make_result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    _binary_shape("div", a, b)

    def bw(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return make_result(a.data / b.data, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _const(a)
    return make_result(-a.data, "neg", (a,), lambda g, needs: (neg(g),))


def power(a, p: float) -> Tensor:
    a = _const(a)
    p = float(p)

    def bw(g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return make_result(a.data ** p, "power", (a,), bw)


def exp(a) -> Tensor:
    a = _const(a)
    return make_result(np.exp(a.data), "exp", (a,), lambda g, needs: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = _const(a)
    return make_result(np.log(a.data), "log", (a,), lambda g, needs: (div(g, a),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = _const(a)

    def bw(g, needs):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return make_result(_sigmoid_np(a.data), "sigmoid", (a,), bw)


def _softplus_np(x: np.ndarray, beta: float) -> np.ndarray:
    bx = beta * x
    return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta


def softplus(a, beta: float = 1.0) -> Tensor:
    """Softplus_beta(x) = log(1 + exp(beta x)) / beta, overflow safe."""
    a = _const(a)
    beta = float(beta)
    if beta <= 0:
        raise ValueError(f"softplus: beta must be positive, got {beta}")

    def bw(g, needs):
        return (mul(g, sigmoid(mul(beta, a))),)

    return make_result(_softplus_np(a.data, beta), "softplus", (a,), bw)


def relu(a) -> Tensor:
    a = _const(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return make_result(np.maximum(a.data, 0.0), "relu", (a,), lambda g, needs: (mul(g, mask),))


# -- linear algebra and shape ops -------------------------------------------


def transpose(a, axes=None) -> Tensor:
    a = _const(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(
        np.transpose(a.data, axes), "transpose", (a,), lambda g, needs: (transpose(g, inv),)
    )


def matmul(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return make_result(a.data @ b.data, "matmul", (a, b), bw)


def dot(a, b) -> Tensor:
    a, b = _const(a), _const(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes differ {a.shape} vs {b.shape}")
    return sum(mul(a, b))


def reshape(a, shape) -> Tensor:
    a = _const(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return make_result(data, "reshape", (a,), lambda g, needs: (reshape(g, a.shape),))


def flatten(a) -> Tensor:
    """Flatten all but the leading (batch) axis."""
    a = _const(a)
    return reshape(a, (a.shape[0], -1))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _const(a)
    axes = _norm_axis(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def bw(g, needs):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _const(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return div(sum(a, axis=axes, keepdims=keepdims), float(count))


def getitem(a, key) -> Tensor:
    a = _const(a)

    def bw(g, needs):
        return (_scatter_index(g, key, a.shape),)

    return make_result(a.data[key], "getitem", (a,), bw)


def _scatter_index(g: Tensor, key, shape) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, key, g.data)  # repeated indices accumulate
    return make_result(out, "index_scatter", (g,), lambda gg, needs: (getitem(gg, key),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_const(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(key)))
        return out

    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    return make_result(data, "concat", tuple(tensors), bw)


# -- norms and softmax -----------------------------------------------------


def l2norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at the zero vector is taken as zero."""
    a = _const(a)
    axes = _norm_axis(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    data = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=keepdims))

    def bw(g, needs):
        n = reshape(l2norm(a, axis=axes, keepdims=False), kept)
        safe = add(n, Tensor((n.data == 0).astype(np.float64)))
        return (mul(broadcast_to(reshape(g, kept), a.shape), div(a, safe)),)

    return make_result(data, "l2norm", (a,), bw)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _const(a)
    m = Tensor(a.data.max(axis=axis, keepdims=True))
    out = add(log(sum(exp(sub(a, m)), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _const(a)
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# -- convolution and pooling ----------------------------------------------


def im2col(x, k: int, pad: int) -> Tensor:
    """Unfold (N, C, H, W) into (N*H*W, C*k*k) patches for stride 1, 'same' padding."""
    x = _const(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"im2col: kernel {k} with padding {pad} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    shape = x.shape
    return make_result(cols, "im2col", (x,), lambda g, needs: (col2im(g, shape, k, pad),))


def col2im(cols, x_shape: tuple, k: int, pad: int) -> Tensor:
    cols = _const(cols)
    n, c, h, w = x_shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if cols.shape != (n * ho * wo, c * k * k):
        raise ShapeError(f"col2im: columns {cols.shape} do not match input {x_shape}, k={k}")
    g6 = cols.data.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return make_result(
        np.ascontiguousarray(out), "col2im", (cols,), lambda g, needs: (im2col(g, k, pad),)
    )


def conv2d(x, weight, bias=None, pad: int = 1) -> Tensor:
    """Stride-1 convolution with symmetric zero padding.

    ``weight`` has shape (F, C, k, k); ``bias`` has shape (F,).
    """
    x, weight = _const(x), _const(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    f, c, k, k2 = weight.shape
    if k != k2 or x.shape[1] != c:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, _, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = im2col(x, k, pad)
    out = matmul(cols, transpose(reshape(weight, (f, c * k * k))))  # (N*Ho*Wo, F)
    if bias is not None:
        bias = _const(bias)
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
        out = add(out, bias)
    return transpose(reshape(out, (n, ho, wo, f)), (0, 3, 1, 2))


def gather_flat(a, idx: np.ndarray, out_shape: tuple) -> Tensor:
    a = _const(a)
    shape = a.shape
    data = a.data.reshape(-1)[idx].reshape(out_shape)
    return make_result(data, "gather", (a,), lambda g, needs: (scatter_flat(g, idx, shape),))


def scatter_flat(g, idx: np.ndarray, out_shape: tuple) -> Tensor:
    """Adjoint of :func:`gather_flat`: sums ``g`` into positions ``idx``."""
    g = _const(g)
    size = int(np.prod(out_shape))
    data = np.bincount(idx, weights=g.data.reshape(-1), minlength=size).reshape(out_shape)
    shape = g.shape
    return make_result(data, "scatter", (g,), lambda gg, needs: (gather_flat(gg, idx, shape),))


def maxpool_indices(x: np.ndarray, size: int) -> np.ndarray:
    """Flat indices of the selected maxima; ties go to the first element."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    xs = x[:, :, : ho * size, : wo * size]
    win = xs.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    di, dj = np.divmod(arg, size)
    rows = np.arange(ho)[None, None, :, None] * size + di
    cols = np.arange(wo)[None, None, None, :] * size + dj
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    return (base + rows * w + cols).reshape(-1)


def maxpool2d(x, size: int = 2) -> Tensor:
    x = _const(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"maxpool2d: window {size} larger than input {x.shape}")
    idx = maxpool_indices(x.data, size)
    return gather_flat(x, idx, (n, c, h // size, w // size))


def avgpool2d(x, size: int = 2) -> Tensor:
    """Mean over non-overlapping size x size windows (trailing rows/columns dropped)."""
    x = _const(x)
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"avgpool2d: window {size} larger than input {x.shape}")
    ho, wo = h // size, w // size
    if (h, w) != (ho * size, wo * size):
        x = getitem(x, (slice(None), slice(None), slice(0, ho * size), slice(0, wo * size)))
    return mean(reshape(x, (n, c, ho, size, wo, size)), axis=(3, 5))


def dense(x, weight, bias=None) -> Tensor:
    """Affine map with ``weight`` of shape (out, in)."""
    x, weight = _const(x), _const(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, transpose(weight))
    if bias is not None:
        out = add(out, bias)
    return out


_FORWARD = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "avgpool2d": avgpool2d,
    "flatten": flatten,
    "relu": relu,
    "softplus": softplus,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "sum": sum,
    "mean": mean,
    "dot": dot,
    "l2norm": l2norm,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch by op name, e.g. ``forward_op("softplus", x, beta=3)``."""
    try:
        fn = _FORWARD[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; known: {sorted(_FORWARD)}") from None
    return fn(*inputs, **params)


def hessian_vector_product(fn, x: Tensor, v, create_graph: bool = False) -> Tensor:
    """H(x) v for a scalar-valued ``fn`` via backward-over-backward."""
    v = _const(v)
    if v.shape != x.shape:
        raise ShapeError(f"hvp: vector shape {v.shape} != input shape {x.shape}")
    xin = x if x.tracked else Tensor(x.data, requires_grad=True)
    with set_grad_enabled(True):
        out = fn(xin)
        (g,) = grad(out, [xin], create_graph=True)
        inner = sum(mul(g, v))
        if inner.node is None:
            # gradient does not depend on x: the Hessian vanishes
            return Tensor(np.zeros_like(x.data))
        (hv,) = grad(inner, [xin], create_graph=create_graph, allow_unused=True)
    return hv
