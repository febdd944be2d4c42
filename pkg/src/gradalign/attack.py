"""Adversarial attribution manipulation with PGD in an l-infinity ball.

The prediction constraint is enforced by reverting any per-sample step that
changes the predicted class, so every returned point keeps the clean
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attributions import DIFFERENTIABLE_METHODS, AttributionMap, attribution_tensor, normalize_scores, normalize_tensor
from .autodiff import Tensor, grad, ops, set_grad_enabled
from .metrics import batch_similarity
from .netzoo import Network

MODES = ("targeted", "untargeted")


class AttackConfigError(ValueError):
    """Invalid attack configuration."""


@dataclass
class AttackConfig:
    mode: str = "targeted"
    epsilon: float = 4 / 255
    step_size: float | None = None  # default epsilon / 10
    iterations: int = 100
    target: np.ndarray | None = None  # single map (input shape) or one per sample
    method: str = "grad"
    normalization: str = "l2_unit"
    revert_on_increase: bool = False
    random_start: bool | None = None  # default: on for untargeted, off for targeted
    bounds: tuple | None = (0.0, 1.0)  # per-channel or scalar domain; None disables clipping
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise AttackConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 1:
            raise AttackConfigError("iterations must be >= 1")
        if self.epsilon < 0:
            raise AttackConfigError("epsilon must be >= 0")
        if self.mode == "targeted" and self.target is None:
            raise AttackConfigError("targeted mode needs a target map")
        if self.method not in DIFFERENTIABLE_METHODS:
            raise AttackConfigError(f"method must be one of {DIFFERENTIABLE_METHODS}, got {self.method!r}")

    @property
    def step(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def uses_random_start(self) -> bool:
        return self.mode == "untargeted" if self.random_start is None else self.random_start


@dataclass
class AttackResult:
    x: np.ndarray
    x_adv: np.ndarray
    loss_trace: np.ndarray  # (iterations + 1, N), loss of the accepted iterate
    prediction_preserved: np.ndarray
    map_clean: AttributionMap
    map_adv: AttributionMap
    sim_to_target: np.ndarray | None = None
    sim_to_original: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prediction: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def make_frame_target(input_shape, border_width: int) -> AttributionMap:
    """Binary map with ones on a border ring of the given width (every channel)."""
    shape = tuple(int(s) for s in input_shape)
    if len(shape) < 2:
        raise ValueError(f"frame target needs a spatial input, got shape {shape}")
    h, w = shape[-2:]
    if border_width < 1 or 2 * border_width >= min(h, w):
        raise ValueError(f"border_width must satisfy 1 <= width < {min(h, w) / 2}, got {border_width}")
    frame = np.ones((h, w))
    frame[border_width:h - border_width, border_width:w - border_width] = 0.0
    scores = np.broadcast_to(frame, shape).copy()[None]
    return AttributionMap(scores, "frame", np.zeros(1, dtype=np.int64))


def _domain(bounds, x: np.ndarray):
    if bounds is None:
        return None, None
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if x.ndim > 2 and lo.ndim == 1:
        lo = lo.reshape((1, -1) + (1,) * (x.ndim - 2))
        hi = hi.reshape((1, -1) + (1,) * (x.ndim - 2))
    return lo, hi


def _project(x: np.ndarray, cand: np.ndarray, eps: float, lo, hi) -> np.ndarray:
    out = x + np.clip(cand - x, -eps, eps)
    if lo is not None:
        out = np.minimum(np.maximum(out, lo), hi)
    return out


def _loss_and_grad(net: Network, xa: np.ndarray, y, ref: np.ndarray, cfg: AttackConfig, need_grad: bool = True):
    """Per-sample ||normalize(h(xa)) - ref||_2 and its input gradient."""
    xin = Tensor(xa, requires_grad=True)
    with set_grad_enabled(True):
        h = attribution_tensor(net, xin, y, cfg.method, create_graph=need_grad)
        diff = ops.sub(normalize_tensor(h, cfg.normalization), ref)
        loss = ops.l2norm(diff, axis=tuple(range(1, diff.ndim)))
        if not need_grad:
            return loss.data, None
        total = ops.sum(loss)
        if total.node is None:
            return loss.data, np.zeros_like(xa)
        (g,) = grad(total, [xin], allow_unused=True)
    return loss.data, (np.zeros_like(xa) if g is None else g.data)


def run_attack(net: Network, x, y, cfg: AttackConfig, method: str | None = None) -> AttackResult:
    """Targeted or untargeted PGD on the attribution distance.

    Targeted mode descends ||n(h(x')) - n(h_t)||, untargeted mode ascends
    ||n(h(x')) - n(h(x))|| with ``n`` the configured normalization.
    """
    if method is not None and method != cfg.method:
        cfg = AttackConfig(**{**cfg.__dict__, "method": method})
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    clean_map = attribution_tensor(net, x, y, cfg.method).data
    if cfg.mode == "targeted":
        target = np.asarray(getattr(cfg.target, "scores", cfg.target), dtype=np.float64)
        if target.shape == x.shape[1:]:
            target = np.broadcast_to(target, x.shape)
        elif target.shape == (1,) + x.shape[1:]:
            target = np.broadcast_to(target, x.shape)
        elif target.shape != x.shape:
            raise AttackConfigError(f"target shape {target.shape} does not match input shape {x.shape[1:]}")
        ref = normalize_scores(target, cfg.normalization)
        sign = -1.0
    else:
        ref = normalize_tensor(Tensor(clean_map), cfg.normalization).data
        target = None
        sign = 1.0
    pred0 = net.predict(x)
    lo, hi = _domain(cfg.bounds, x)
    eps, step = float(cfg.epsilon), cfg.step
    rng = np.random.default_rng(cfg.seed)

    xa = x.copy()
    if cfg.uses_random_start and eps > 0:
        start = _project(x, x + rng.uniform(-eps, eps, size=x.shape), eps, lo, hi)
        ok = net.predict(start) == pred0
        xa[ok] = start[ok]
    loss, g = _loss_and_grad(net, xa, y, ref, cfg)
    trace = [loss.copy()]
    for _ in range(cfg.iterations):
        if eps == 0:
            trace.append(loss.copy())
            continue
        cand = _project(x, xa + sign * step * np.sign(g), eps, lo, hi)
        ok = net.predict(cand) == pred0
        if cfg.revert_on_increase:
            cand_loss, _ = _loss_and_grad(net, cand, y, ref, cfg, need_grad=False)
            ok &= sign * (cand_loss - loss) >= 0
        xa = np.where(ok.reshape((-1,) + (1,) * (x.ndim - 1)), cand, xa)
        loss, g = _loss_and_grad(net, xa, y, ref, cfg)
        trace.append(loss.copy())

    pred = net.predict(xa)
    adv_map = attribution_tensor(net, xa, y, cfg.method).data
    sim_target = batch_similarity(adv_map, target, "cossim") if target is not None else None
    return AttackResult(
        x=x, x_adv=xa, loss_trace=np.stack(trace), prediction_preserved=pred == pred0,
        map_clean=AttributionMap(clean_map, cfg.method, y), map_adv=AttributionMap(adv_map, cfg.method, y),
        sim_to_target=sim_target, sim_to_original=batch_similarity(adv_map, clean_map, "cossim"), prediction=pred,
    )


def targeted_aam(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    if cfg.mode != "targeted":
        raise AttackConfigError("targeted_aam needs mode='targeted'")
    return run_attack(net, x, y, cfg)


def untargeted_aam(net: Network, x, y, cfg: AttackConfig) -> AttackResult:
    if cfg.mode != "untargeted":
        raise AttackConfigError("untargeted_aam needs mode='untargeted'")
    return run_attack(net, x, y, cfg)
