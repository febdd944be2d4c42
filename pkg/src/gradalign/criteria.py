"""Gradient-alignment criteria between nearby inputs.

All functions work on batches: ``x`` is (N, ...), ``y`` holds N class
indices and the result is a length-N tensor, one value per sample.  When
``create_graph`` is set the values stay differentiable with respect to the
network parameters (and to ``x`` when it is tracked).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad, ops, set_grad_enabled
from .netzoo import Network

DEGENERATE_NORM = 1e-10


class NotTwiceDifferentiableError(ValueError):
    """Second-order quantity requested on a piecewise-linear network."""


@dataclass
class PerturbationSpec:
    epsilon: float
    sampler: str = "uniform_ball"  # uniform_ball | unit_direction
    sample_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")
        if self.sampler not in ("uniform_ball", "unit_direction"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    def sample(self, shape, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        return sample_perturbation(shape, self.epsilon, self.sampler, rng)


@dataclass
class CriterionValue:
    kind: str  # l2 | cos | hessian_surrogate | upper_bound
    values: np.ndarray
    degenerate: np.ndarray | None = None


def sample_perturbation(shape, epsilon: float, sampler: str, rng: np.random.Generator) -> np.ndarray:
    """``uniform_ball``: U([-eps, eps]^d).  ``unit_direction``: per-sample unit l2 vectors."""
    shape = tuple(shape)
    if sampler == "uniform_ball":
        return rng.uniform(-epsilon, epsilon, size=shape)
    if sampler == "unit_direction":
        v = rng.standard_normal(shape)
        axes = tuple(range(1, len(shape)))
        return v / np.sqrt((v * v).sum(axis=axes, keepdims=True))
    raise ValueError(f"unknown sampler {sampler!r}")


def _feature_axes(t: Tensor) -> tuple[int, ...]:
    return tuple(range(1, t.ndim))


def one_hot(y, count: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    out = np.zeros((y.size, count))
    out[np.arange(y.size), y] = 1.0
    return out


def select_logit(logits: Tensor, y) -> Tensor:
    """Sum over the batch of g_{y_n}(x_n)."""
    return ops.sum(ops.mul(logits, one_hot(y, logits.shape[1])))


def input_gradient(net: Network, x, y, create_graph: bool = False, guided: bool = False) -> Tensor:
    """Per-sample gradient of the label logit with respect to the input.

    ``guided`` returns the guided-backprop map instead (see :func:`guided_gradient`).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    xin = x if x.tracked else Tensor(x.data, requires_grad=True)
    if guided:
        return guided_gradient(net, xin, y, create_graph)
    with set_grad_enabled(True):
        out = select_logit(net.forward(xin), y)
        if out.node is None:
            return Tensor(np.zeros_like(xin.data))
        (g,) = grad(out, [xin], create_graph=create_graph, allow_unused=True)
    return g


def guided_gradient(net: Network, x: Tensor, y, create_graph: bool = False) -> Tensor:
    """Guided-backprop map from an explicit backward recursion.

    At every activation site the upstream signal is multiplied by the
    activation slope and passes only where both the signal and the
    pre-activation are positive.  The forward pass is the ordinary one, so
    with ``create_graph`` the map is differentiable with respect to x and the
    parameters with true derivatives of the gating slopes.  Layer transposes
    are taken as vector-Jacobian products on fresh leaves.
    """
    with set_grad_enabled(True):
        inputs, pre = [], {}
        h = x
        for i in range(len(net.layers)):
            inputs.append(h)
            h = net.layer_forward(i, h)
            if net.activated(i):
                pre[i] = h
                h = net.activate(h)
        g = Tensor(one_hot(y, net.class_count))
        for i in reversed(range(len(net.layers))):
            if i in pre and net.activation != "identity":
                z = pre[i]
                gate = ((g.data > 0) & (z.data > 0)).astype(np.float64)
                g = ops.mul(ops.mul(g, net.activation_slope(z)), gate)
            leaf = Tensor(inputs[i].data, requires_grad=True)
            out = ops.sum(ops.mul(net.layer_forward(i, leaf), g))
            (g,) = grad(out, [leaf], create_graph=create_graph)
    return g


def gradient_pair(net: Network, x, y, delta, create_graph: bool = False,
                  detach_base: bool = False) -> tuple[Tensor, Tensor]:
    """(grad at x, grad at x + delta).  ``detach_base`` treats grad at x as a constant."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    delta = delta if isinstance(delta, Tensor) else Tensor(delta)
    if delta.shape != x.shape:
        raise ValueError(f"delta shape {delta.shape} != x shape {x.shape}")
    base = input_gradient(net, x, y, create_graph=create_graph and not detach_base)
    pert = input_gradient(net, ops.add(x, delta), y, create_graph=create_graph)
    return base, pert


def l2_from_gradients(base: Tensor, pert: Tensor) -> Tensor:
    return ops.l2norm(ops.sub(pert, base), axis=_feature_axes(base))


def cos_from_gradients(base: Tensor, pert: Tensor) -> tuple[Tensor, np.ndarray]:
    """0.5 * (1 - cossim), evaluated as 0.25 * ||a/|a| - b/|b|||^2.

    The two forms agree exactly in real arithmetic; this one has no
    cancellation near parallel gradients and is exactly 0 for identical ones.
    Samples where either gradient norm is below ``DEGENERATE_NORM`` give 0 and
    are flagged.
    """
    axes = _feature_axes(base)
    keep = (1,) * len(axes)
    nb = ops.l2norm(base, axis=axes)
    npert = ops.l2norm(pert, axis=axes)
    degenerate = (nb.data < DEGENERATE_NORM) | (npert.data < DEGENERATE_NORM)
    shape = (base.shape[0],) + keep
    ub = ops.div(base, ops.reshape(ops.add(nb, degenerate.astype(np.float64)), shape))
    up = ops.div(pert, ops.reshape(ops.add(npert, degenerate.astype(np.float64)), shape))
    diff = ops.sub(up, ub)
    value = ops.mul(ops.mul(0.25, ops.sum(ops.mul(diff, diff), axis=axes)), (~degenerate).astype(np.float64))
    return value, degenerate


def l2_criterion(net: Network, x, y, delta, create_graph: bool = False) -> Tensor:
    """|| grad g_y(x + delta) - grad g_y(x) ||_2 per sample."""
    return l2_from_gradients(*gradient_pair(net, x, y, delta, create_graph))


def cos_criterion(net: Network, x, y, delta, create_graph: bool = False, with_flags: bool = False):
    """Cosine robust criterion 0.5 * (1 - cossim(grad at x + delta, grad at x)) per sample."""
    value, degenerate = cos_from_gradients(*gradient_pair(net, x, y, delta, create_graph))
    return (value, degenerate) if with_flags else value


def require_twice_differentiable(net: Network, what: str) -> None:
    if not net.twice_differentiable:
        raise NotTwiceDifferentiableError(
            f"{what}: the network uses ReLU, so the input Hessian of every logit is the zero "
            "matrix almost everywhere; use softplus activations"
        )


def hessian_frobenius_estimate(fn: Callable[[Tensor], Tensor], x, probes: int = 1, seed: int = 0,
                               create_graph: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Hutchinson estimate of ||H||_F per sample, sqrt(mean_k ||H v_k||^2) with Rademacher v_k.

    ``fn`` maps a batch (N, ...) to a scalar that is a sum of independent
    per-sample functions, so the batch Hessian is block diagonal.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    x = x if isinstance(x, Tensor) else Tensor(x)
    xin = x if x.tracked else Tensor(x.data, requires_grad=True)
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = x.shape[0]
    with set_grad_enabled(True):
        out = fn(xin)
        if out.node is None:
            return Tensor(np.zeros(n))
        (g,) = grad(out, [xin], create_graph=True, allow_unused=True)
        hvs = []
        for _ in range(probes):
            v = rng.choice([-1.0, 1.0], size=x.shape)
            inner = ops.sum(ops.mul(g, v))
            if inner.node is None:
                hvs.append(Tensor(np.zeros((n, 1, int(np.prod(x.shape[1:]))))))
                continue
            (hv,) = grad(inner, [xin], create_graph=create_graph, allow_unused=True)
            hvs.append(ops.reshape(hv, (n, 1, -1)))
        stacked = ops.concat(hvs, axis=1) if len(hvs) > 1 else hvs[0]
        return ops.div(ops.l2norm(stacked, axis=(1, 2)), float(np.sqrt(probes)))


def hessian_surrogate(net: Network, x, y, probes: int = 1, seed: int = 0, create_graph: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """Frobenius norm estimate of the input Hessian of the label logit."""
    require_twice_differentiable(net, "hessian_surrogate")
    return hessian_frobenius_estimate(lambda z: select_logit(net.forward(z), y), x, probes, seed,
                                      create_graph, rng)


def logit_hvp(net: Network, x, y, v) -> np.ndarray:
    """H_{g_y}(x) v per sample."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    hv = ops.hessian_vector_product(lambda z: select_logit(net.forward(z), y), x, v)
    return hv.data


def crc_upper_bound(net: Network, x, y, direction, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Measured CRC at x + eps * direction and eps ||H d|| / ||grad g(x + eps d)||.

    ``direction`` holds one unit-l2 vector per sample.
    """
    require_twice_differentiable(net, "crc_upper_bound")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    d = np.asarray(direction.data if isinstance(direction, Tensor) else direction, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    norms = np.sqrt((d * d).sum(axis=axes))
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ValueError(f"direction must have unit l2 norm per sample; got norms {norms}")
    base, pert = gradient_pair(net, x, y, epsilon * d)
    lhs, degenerate = cos_from_gradients(base, pert)
    hv = logit_hvp(net, x, y, d)
    pert_norm = np.sqrt((pert.data * pert.data).sum(axis=axes))
    safe = np.where(degenerate, 1.0, pert_norm)
    rhs = np.where(degenerate, 0.0, epsilon * np.sqrt((hv * hv).sum(axis=axes)) / safe)
    return lhs.data, rhs


def maxent_regularizer(net: Network, x) -> Tensor:
    """Entropy of the predicted class distribution per sample."""
    logp = ops.log_softmax(net.forward(x), axis=-1)
    return ops.neg(ops.sum(ops.mul(ops.exp(logp), logp), axis=-1))


def entropy_of_logits(logits) -> Tensor:
    logp = ops.log_softmax(logits, axis=-1)
    return ops.neg(ops.sum(ops.mul(ops.exp(logp), logp), axis=-1))
