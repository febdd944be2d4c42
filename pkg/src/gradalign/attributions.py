"""Saliency maps: gradient, input x gradient, guided backprop, LRP and SmoothGrad.

Gradient-based maps are available as tensors (``attribution_tensor``) so an
attack can differentiate through them.  LRP works on plain arrays and is not
differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .criteria import input_gradient
from .netzoo import Network

METHODS = ("grad", "xgrad", "gbp", "lrp", "smoothgrad")
DIFFERENTIABLE_METHODS = ("grad", "xgrad", "gbp")
NORMALIZATIONS = ("l2_unit", "minmax_255", "abs_sum_1")

LRP_STABILIZER = 1e-9
LRP_STABILIZER_THRESHOLD = 1e-6


@dataclass
class AttributionMap:
    scores: np.ndarray  # (N, *input_shape)
    method: str
    y: np.ndarray
    normalized: str | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)


def _as_batch(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def attribution_tensor(net: Network, x, y, method: str = "grad", create_graph: bool = False) -> Tensor:
    """Map as a tensor; with ``create_graph`` it is differentiable in x and parameters."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if method == "grad":
        return input_gradient(net, x, y, create_graph)
    if method == "xgrad":
        return ops.mul(x, input_gradient(net, x, y, create_graph))
    if method == "gbp":
        return input_gradient(net, x, y, create_graph, guided=True)
    raise ValueError(f"method {method!r} is not differentiable; choose from {DIFFERENTIABLE_METHODS}")


def grad_attr(net: Network, x, y) -> AttributionMap:
    return AttributionMap(attribution_tensor(net, x, y, "grad").data, "grad", y)


def input_x_grad_attr(net: Network, x, y) -> AttributionMap:
    return AttributionMap(attribution_tensor(net, x, y, "xgrad").data, "xgrad", y)


def guided_backprop_attr(net: Network, x, y) -> AttributionMap:
    return AttributionMap(attribution_tensor(net, x, y, "gbp").data, "gbp", y)


def smoothgrad_attr(net: Network, x, y, sigma: float = 0.1, n_samples: int = 16, seed: int = 0) -> AttributionMap:
    """Mean gradient over inputs perturbed with N(0, sigma^2) noise."""
    if sigma < 0 or n_samples < 1:
        raise ValueError("smoothgrad needs sigma >= 0 and n_samples >= 1")
    x = _as_batch(x)
    rng = np.random.default_rng(seed)
    total = np.zeros_like(x)
    for _ in range(n_samples):
        noise = rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else 0.0
        total += input_gradient(net, x + noise, y).data
    return AttributionMap(total / n_samples, "smoothgrad", y)


# -- LRP ---------------------------------------------------------------------------


def expand_bounds(bound, input_shape) -> np.ndarray:
    """Broadcast a scalar, per-channel or full-shape bound to ``input_shape``."""
    b = np.asarray(bound, dtype=np.float64)
    input_shape = tuple(input_shape)
    if b.ndim == 0 or b.shape == input_shape:
        return np.broadcast_to(b, input_shape)
    if b.shape == (input_shape[0],):
        return np.broadcast_to(b.reshape((-1,) + (1,) * (len(input_shape) - 1)), input_shape)
    raise ValueError(f"bounds of shape {b.shape} do not fit input shape {input_shape}")


def _stabilize(z: np.ndarray, eps: float, threshold: float) -> np.ndarray:
    small = np.abs(z) < threshold
    if not small.any():
        return z
    sign = np.where(z >= 0, 1.0, -1.0)
    return np.where(small, z + eps * sign, z)


def _linear_fwd(spec, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    with no_grad():
        if spec.kind == "dense":
            return a @ w.T
        return ops.conv2d(Tensor(a), Tensor(w), None, pad=spec.padding).data


def _linear_bwd(spec, w: np.ndarray, s: np.ndarray, a_shape) -> np.ndarray:
    """Transpose of the (bias-free) layer applied to ``s``."""
    with no_grad():
        if spec.kind == "dense":
            return s @ w
        f = w.shape[0]
        cols = s.transpose(0, 2, 3, 1).reshape(-1, f) @ w.reshape(f, -1)
        return ops.col2im(Tensor(cols), a_shape, spec.kernel, spec.padding).data


def lrp_attr(net: Network, x, y, bounds=(0.0, 1.0), stabilizer: float = LRP_STABILIZER,
             threshold: float = LRP_STABILIZER_THRESHOLD, return_layers: bool = False):
    """LRP with the z+ rule on hidden layers and the z^B box rule on the input layer.

    Relevance starts as the one-hot of the label at the logits.  Max-pooling
    routes relevance to the selected input; average pooling shares it in
    proportion to each input's contribution.  ``bounds`` is (low, high), each a
    scalar, a per-channel vector or a full input-shaped array.  Denominators
    smaller than ``threshold`` in magnitude get ``stabilizer`` added (signed).
    With ``return_layers`` the relevance at every layer boundary is returned as
    well, input first.
    """
    x = _as_batch(x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    low = expand_bounds(bounds[0], net.input_shape)[None]
    high = expand_bounds(bounds[1], net.input_shape)[None]

    # forward pass recording every layer input
    last = net.param_layer_indices[-1]
    inputs = []
    h = x
    with no_grad():
        for i, layer in enumerate(net.layers):
            inputs.append(h)
            spec = layer.spec
            if spec.parameterized:
                h = _linear_fwd(spec, layer.weight.data, h)
                if layer.bias is not None:
                    b = layer.bias.data
                    h = h + (b if spec.kind == "dense" else b[None, :, None, None])
                if i != last:
                    h = net.activate(Tensor(h)).data
            elif spec.kind == "maxpool2d":
                h = ops.maxpool2d(Tensor(h), spec.pool).data
            elif spec.kind == "avgpool2d":
                h = ops.avgpool2d(Tensor(h), spec.pool).data
            else:
                h = h.reshape(h.shape[0], -1)

    relevance = np.zeros((x.shape[0], net.class_count))
    relevance[np.arange(x.shape[0]), y] = 1.0
    layers_r = [relevance]
    for i in reversed(range(len(net.layers))):
        layer, a = net.layers[i], inputs[i]
        spec = layer.spec
        if spec.kind == "flatten":
            relevance = relevance.reshape(a.shape)
        elif spec.kind == "maxpool2d":
            idx = ops.maxpool_indices(a, spec.pool)
            relevance = np.bincount(idx, weights=relevance.reshape(-1), minlength=a.size).reshape(a.shape)
        elif spec.kind == "avgpool2d":
            # pooled value is a sum of non-negative contributions a_i / k^2: share by contribution
            z = ops.avgpool2d(Tensor(a), spec.pool).data
            s = relevance / _stabilize(z, stabilizer, threshold)
            k = spec.pool
            back = np.zeros_like(a)
            ho, wo = s.shape[2], s.shape[3]
            back[:, :, :ho * k, :wo * k] = np.repeat(np.repeat(s, k, axis=2), k, axis=3) / (k * k)
            relevance = a * back
        elif i == 0:
            w = layer.weight.data
            wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
            lo = np.broadcast_to(low, a.shape)
            hi = np.broadcast_to(high, a.shape)
            z = _linear_fwd(spec, w, a) - _linear_fwd(spec, wp, lo) - _linear_fwd(spec, wn, hi)
            s = relevance / _stabilize(z, stabilizer, threshold)
            relevance = (a * _linear_bwd(spec, w, s, a.shape)
                         - lo * _linear_bwd(spec, wp, s, a.shape)
                         - hi * _linear_bwd(spec, wn, s, a.shape))
        else:
            wp = np.maximum(layer.weight.data, 0.0)
            z = _linear_fwd(spec, wp, a)
            s = relevance / _stabilize(z, stabilizer, threshold)
            relevance = a * _linear_bwd(spec, wp, s, a.shape)
        layers_r.append(relevance)
    amap = AttributionMap(relevance, "lrp", y)
    if return_layers:
        return amap, layers_r[::-1]
    return amap


def attribute(net: Network, x, y, method: str = "grad", bounds=(0.0, 1.0), **kwargs) -> AttributionMap:
    """Dispatch to one of ``METHODS``."""
    if method == "grad":
        return grad_attr(net, x, y)
    if method == "xgrad":
        return input_x_grad_attr(net, x, y)
    if method == "gbp":
        return guided_backprop_attr(net, x, y)
    if method == "lrp":
        return lrp_attr(net, x, y, bounds=bounds, **kwargs)
    if method == "smoothgrad":
        return smoothgrad_attr(net, x, y, **kwargs)
    raise ValueError(f"unknown attribution method {method!r}; choose from {METHODS}")


# -- normalization -----------------------------------------------------------------


def normalize_scores(scores: np.ndarray, scheme: str) -> np.ndarray:
    """Per-sample normalization of a batch of maps (N, ...)."""
    s = np.asarray(scores, dtype=np.float64)
    axes = tuple(range(1, s.ndim))
    if scheme == "l2_unit":
        norm = np.sqrt((s * s).sum(axis=axes, keepdims=True))
        if np.any(norm <= 1e-12):
            raise ValueError("l2_unit normalization of a degenerate (near-zero) map")
        return s / norm
    if scheme == "abs_sum_1":
        total = np.abs(s).sum(axis=axes, keepdims=True)
        return s / np.where(total > 0, total, 1.0)
    if scheme == "minmax_255":
        lo = s.min(axis=axes, keepdims=True)
        span = s.max(axis=axes, keepdims=True) - lo
        return np.where(span > 0, (s - lo) / np.where(span > 0, span, 1.0) * 255.0, 0.0)
    raise ValueError(f"unknown normalization {scheme!r}; choose from {NORMALIZATIONS}")


def normalize_map(amap: AttributionMap, scheme: str) -> AttributionMap:
    return AttributionMap(normalize_scores(amap.scores, scheme), amap.method, amap.y, scheme)


def l2_unit_tensor(t: Tensor) -> Tensor:
    """Differentiable per-sample l2 normalization (zero maps stay zero)."""
    axes = tuple(range(1, t.ndim))
    n = ops.l2norm(t, axis=axes, keepdims=True)
    safe = ops.add(n, (n.data == 0).astype(np.float64))
    return ops.div(t, safe)


def normalize_tensor(t: Tensor, scheme: str) -> Tensor:
    if scheme == "l2_unit":
        return l2_unit_tensor(t)
    if scheme == "abs_sum_1":
        axes = tuple(range(1, t.ndim))
        total = ops.sum(ops.mul(t, np.sign(t.data)), axis=axes, keepdims=True)
        return ops.div(t, ops.add(total, (total.data == 0).astype(np.float64)))
    raise ValueError(f"normalization {scheme!r} is not available for differentiable maps")


# -- export -----------------------------------------------------------------------


def spatial_map(scores: np.ndarray) -> np.ndarray:
    """Reduce a single (C, H, W) map to (H, W) by summing channels; 1-D maps become one row."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 3:
        return s.sum(axis=0)
    if s.ndim == 1:
        return s[None, :]
    return s


def write_pgm(path, image: np.ndarray) -> Path:
    """Binary 8-bit portable graymap."""
    path = Path(path)
    img = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    if maxval != 255 or data.size != w * h:
        raise ValueError(f"{path}: unsupported or truncated PGM")
    return data.reshape(h, w)


def export_heatmap(amap: AttributionMap, index: int, stem) -> dict[str, Path]:
    """Write ``stem.pgm`` (min-max 0..255), ``stem.f64`` raw scores and ``stem.txt`` sidecar."""
    stem = Path(stem)
    scores = amap.scores[index]
    spatial = spatial_map(scores)
    gray = normalize_scores(spatial[None], "minmax_255")[0]
    pgm = write_pgm(stem.with_suffix(".pgm"), gray)
    raw = stem.with_suffix(".f64")
    raw.write_bytes(scores.astype("<f8").tobytes())
    side = stem.with_suffix(".txt")
    side.write_text(
        f"shape {' '.join(str(s) for s in scores.shape)}\n"
        f"dtype float64-le\n"
        f"method {amap.method}\n"
        f"class {int(amap.y[index])}\n"
        f"normalization {amap.normalized or 'none'}\n"
    )
    return {"pgm": pgm, "raw": raw, "sidecar": side}


def read_raw_map(stem) -> np.ndarray:
    stem = Path(stem)
    meta = dict(line.split(" ", 1) for line in stem.with_suffix(".txt").read_text().splitlines())
    shape = tuple(int(s) for s in meta["shape"].split())
    return np.frombuffer(stem.with_suffix(".f64").read_bytes(), dtype="<f8").reshape(shape)
