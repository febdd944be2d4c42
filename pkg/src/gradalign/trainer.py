"""Loss assembly, optimizers, learning-rate schedule and the training loop.

Every loss function returns ``(total, parts)`` where ``total`` is a taped
scalar and ``parts`` maps component names to the already weighted float
contributions, so ``sum(parts.values()) == total``.
"""

from __future__ import annotations

import csv
import math
import resource
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attributions import smoothgrad_attr
from .autodiff import Tensor, grad, no_grad, ops, set_grad_enabled
from .criteria import (
    cos_from_gradients,
    entropy_of_logits,
    hessian_surrogate,
    input_gradient,
    l2_from_gradients,
    one_hot,
    require_twice_differentiable,
    select_logit,
)
from .datahub import Dataset
from .netzoo import Network, save_checkpoint

REGULARIZERS = ("ce", "l2", "cos", "l2cos", "hessian", "maxent", "atex", "iga")
OPTIMIZERS = ("sgd", "adam", "adamw")
COMPONENTS = ("ce", "l2_term", "cos_term", "other_term")
LOG_COLUMNS = ("epoch", "ce", "l2_term", "cos_term", "acc", "seconds", "other_term", "total", "lr")


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDivergedError(RuntimeError):
    """A loss component became non-finite."""


@dataclass
class RunConfig:
    regularizer: str = "ce"
    lambda_cos: float = 1.0
    lambda_l2: float = 0.1
    lam: float = 1e-3  # method-specific weight: hessian, maxent, atex, iga
    epsilon: float = 8 / 255
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 4e-5
    momentum: float = 0.0
    epochs: int = 10
    batch_size: int = 128
    milestones: tuple[int, ...] = (100, 150)
    lr_decay: float = 0.1
    beta: float = 3.0
    detach_base_gradient: bool = False
    hessian_probes: int = 1
    atex_epsilon: float = 2.0
    atex_inner: int = 1  # n_i points along the teacher map
    atex_outer: int = 1  # n_p points per x^i along an orthogonal direction
    smoothgrad_sigma: float = 0.1
    smoothgrad_samples: int = 8
    iga_epsilon: float = 8 / 255
    iga_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer: {self.regularizer!r} not in {REGULARIZERS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: {self.optimizer!r} not in {OPTIMIZERS}")
        for name in ("lambda_cos", "lambda_l2", "lam", "epsilon", "weight_decay", "momentum",
                     "atex_epsilon", "smoothgrad_sigma", "iga_epsilon"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name}: must be a finite value >= 0, got {value}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones: must be strictly increasing, got {list(self.milestones)}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay: must be in (0, 1], got {self.lr_decay}")
        for name in ("hessian_probes", "atex_inner", "atex_outer", "smoothgrad_samples", "iga_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class EpochRecord:
    epoch: int
    ce: float
    l2_term: float
    cos_term: float
    other_term: float
    total: float
    acc: float
    seconds: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    peak_memory_kb: int = 0
    wall_time: float = 0.0
    checkpoint: Path | None = None
    log_path: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].acc if self.epochs else float("nan")

    def mean_epoch_seconds(self) -> float:
        return float(np.mean([e.seconds for e in self.epochs])) if self.epochs else 0.0


# -- losses ---------------------------------------------------------------------


def _ce(logits: Tensor, y) -> Tensor:
    logp = ops.log_softmax(logits, axis=-1)
    return ops.neg(ops.mean(ops.sum(ops.mul(logp, one_hot(y, logits.shape[1])), axis=-1)))


def _parts(**terms) -> dict[str, float]:
    out = {name: 0.0 for name in COMPONENTS}
    out.update({k: float(v) for k, v in terms.items()})
    return out


def _leaf(x) -> Tensor:
    return Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)


def _draw_delta(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=shape)


def combined_loss(net: Network, x, y, cfg: RunConfig, rng: np.random.Generator | None = None,
                  delta=None, lambda_l2: float | None = None, lambda_cos: float | None = None):
    """CE + lambda_cos * Gamma_cos + lambda_l2 * Gamma_l2 with one uniform delta draw."""
    lam_l2 = cfg.lambda_l2 if lambda_l2 is None else lambda_l2
    lam_cos = cfg.lambda_cos if lambda_cos is None else lambda_cos
    xin = _leaf(x)
    with set_grad_enabled(True):
        logits = net.forward(xin)
        ce = _ce(logits, y)
        if lam_l2 == 0 and lam_cos == 0:
            return ce, _parts(ce=ce.item())
        if delta is None:
            rng = rng if rng is not None else np.random.default_rng(cfg.seed)
            delta = _draw_delta(xin.shape, cfg.epsilon, rng)
        out = select_logit(logits, y)
        if out.node is None:  # no parameters upstream of the logits
            return ce, _parts(ce=ce.item())
        (base,) = grad(out, [xin], create_graph=not cfg.detach_base_gradient)
        pert = input_gradient(net, _leaf(xin.data + np.asarray(delta)), y, create_graph=True)
        total, terms = ce, {"ce": ce.item()}
        if lam_l2:
            l2 = ops.mul(lam_l2, ops.mean(l2_from_gradients(base, pert)))
            total, terms["l2_term"] = ops.add(total, l2), l2.item()
        if lam_cos:
            cos_values, _ = cos_from_gradients(base, pert)
            cos = ops.mul(lam_cos, ops.mean(cos_values))
            total, terms["cos_term"] = ops.add(total, cos), cos.item()
    return total, _parts(**terms)


def ce_loss(net: Network, x, y, cfg: RunConfig, rng=None):
    return combined_loss(net, x, y, cfg, rng, lambda_l2=0.0, lambda_cos=0.0)


def l2_loss(net: Network, x, y, cfg: RunConfig, rng=None, delta=None):
    return combined_loss(net, x, y, cfg, rng, delta, lambda_cos=0.0)


def cos_loss(net: Network, x, y, cfg: RunConfig, rng=None, delta=None):
    return combined_loss(net, x, y, cfg, rng, delta, lambda_l2=0.0)


def hessian_loss(net: Network, x, y, cfg: RunConfig, rng=None):
    """CE + lam * mean Hutchinson estimate of ||H_{g_y}(x)||_F."""
    require_twice_differentiable(net, "hessian_loss")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    with set_grad_enabled(True):
        ce = _ce(net.forward(Tensor(x)), y)
        if cfg.lam == 0:
            return ce, _parts(ce=ce.item())
        h = hessian_surrogate(net, x, y, probes=cfg.hessian_probes, create_graph=True, rng=rng)
        term = ops.mul(cfg.lam, ops.mean(h))
        return ops.add(ce, term), _parts(ce=ce.item(), other_term=term.item())


def maxent_loss(net: Network, x, y, cfg: RunConfig, rng=None):
    """CE - lam * mean entropy of the predicted distribution."""
    with set_grad_enabled(True):
        logits = net.forward(Tensor(x))
        ce = _ce(logits, y)
        term = ops.mul(-cfg.lam, ops.mean(entropy_of_logits(logits)))
        return ops.add(ce, term), _parts(ce=ce.item(), other_term=term.item())


def _kl(p_logits: Tensor, q_logits) -> Tensor:
    """Per-sample KL(p || q) between categorical distributions given by logits."""
    logp = ops.log_softmax(p_logits, axis=-1)
    logq = ops.log_softmax(q_logits, axis=-1)
    return ops.sum(ops.mul(ops.exp(logp), ops.sub(logp, logq)), axis=-1)


def teacher_directions(teacher: Network, x, y, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Unit SmoothGrad directions of the teacher and a per-sample degeneracy flag."""
    h = smoothgrad_attr(teacher, x, y, sigma=cfg.smoothgrad_sigma, n_samples=cfg.smoothgrad_samples,
                        seed=cfg.seed).scores
    axes = tuple(range(1, h.ndim))
    norms = np.sqrt((h * h).sum(axis=axes, keepdims=True))
    degenerate = norms.reshape(-1) < 1e-12
    return h / np.where(norms < 1e-12, 1.0, norms), degenerate


def atex_loss(teacher: Network, student: Network, x, y, cfg: RunConfig, rng=None, directions=None):
    """KL(g(x) || f(x)) + lam * sum_i sum_p KL(g(x^p) || f(x^i)), averaged over the batch.

    ``g`` is the student and ``f`` the frozen teacher.  x^i moves along the
    teacher's unit SmoothGrad map by Delta_i in [-eps, eps]; x^p moves from
    x^i along a random direction orthogonal to that map.  Samples whose
    teacher map vanishes get no perturbation terms.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n = x.shape[0]
    axes = tuple(range(1, x.ndim))
    if directions is None:
        directions = teacher_directions(teacher, x, y, cfg)
    u, degenerate = directions
    keep = (~degenerate).astype(np.float64)
    with no_grad():
        f_x = teacher.forward(x).data
    with set_grad_enabled(True):
        kl0 = ops.mean(_kl(student.forward(Tensor(x)), f_x))
        if cfg.lam == 0:
            return kl0, _parts(ce=kl0.item())
        total = None
        bshape = (n,) + (1,) * len(axes)
        for _ in range(cfg.atex_inner):
            xi = x + rng.uniform(-cfg.atex_epsilon, cfg.atex_epsilon, size=bshape) * u
            with no_grad():
                f_xi = teacher.forward(xi).data
            for _ in range(cfg.atex_outer):
                r = rng.standard_normal(x.shape)
                r = r - (r * u).sum(axis=axes, keepdims=True) * u
                r = r / np.maximum(np.sqrt((r * r).sum(axis=axes, keepdims=True)), 1e-12)
                xp = xi + rng.uniform(-cfg.atex_epsilon, cfg.atex_epsilon, size=bshape) * r
                kl = ops.mul(_kl(student.forward(Tensor(xp)), f_xi), keep)
                total = kl if total is None else ops.add(total, kl)
        term = ops.mul(cfg.lam, ops.mean(total))
        return ops.add(kl0, term), _parts(ce=kl0.item(), other_term=term.item())


def _cosine_distance(a: Tensor, b) -> Tensor:
    """Per-sample 1 - cossim(a, b); 0 where either vector vanishes."""
    axes = tuple(range(1, a.ndim))
    b = b if isinstance(b, Tensor) else Tensor(b)
    na = ops.l2norm(a, axis=axes)
    nb = ops.l2norm(b, axis=axes)
    bad = (na.data < 1e-12) | (nb.data < 1e-12)
    denom = ops.add(ops.mul(na, nb), bad.astype(np.float64))
    cs = ops.div(ops.sum(ops.mul(a, b), axis=axes), denom)
    return ops.mul(ops.sub(1.0, cs), (~bad).astype(np.float64))


def soft_margin(d_true: Tensor, d_other: Tensor) -> Tensor:
    """log(1 + exp(-(d_other - d_true))), computed stably."""
    return ops.softplus(ops.sub(d_true, d_other), 1.0)


def runner_up(logits: np.ndarray, y) -> np.ndarray:
    """Highest-scoring class other than the label."""
    masked = np.array(logits, dtype=np.float64)
    masked[np.arange(len(masked)), np.asarray(y)] = -np.inf
    return masked.argmax(axis=1)


def iga_attr_loss(net: Network, x: Tensor, y, other, create_graph: bool) -> Tensor:
    """Per-sample soft-margin triplet loss on cosine distance between input-gradients and x."""
    g_true = input_gradient(net, x, y, create_graph=create_graph)
    g_other = input_gradient(net, x, other, create_graph=create_graph)
    return soft_margin(_cosine_distance(g_true, x), _cosine_distance(g_other, x))


def iga_loss(net: Network, x, y, cfg: RunConfig, rng=None):
    """CE(x + delta) + lam * L_attr(x + delta), delta from a few PGD steps maximizing L_attr."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with no_grad():
        other = runner_up(net.forward(x).data, y)
    eps = cfg.iga_epsilon
    delta = np.zeros_like(x)
    step = 2.5 * eps / cfg.iga_steps
    if eps > 0 and cfg.lam > 0:
        for _ in range(cfg.iga_steps):
            xin = _leaf(x + delta)
            with set_grad_enabled(True):
                attr = ops.sum(iga_attr_loss(net, xin, y, other, create_graph=True))
                if attr.node is None:
                    break
                (gx,) = grad(attr, [xin], allow_unused=True)
            delta = np.clip(delta + step * np.sign(gx.data), -eps, eps)
    xadv = _leaf(x + delta)
    with set_grad_enabled(True):
        ce = _ce(net.forward(Tensor(xadv.data)), y)
        if cfg.lam == 0:
            return ce, _parts(ce=ce.item())
        term = ops.mul(cfg.lam, ops.mean(iga_attr_loss(net, xadv, y, other, create_graph=True)))
        return ops.add(ce, term), _parts(ce=ce.item(), other_term=term.item())


def compute_loss(net: Network, x, y, cfg: RunConfig, rng: np.random.Generator,
                 teacher: Network | None = None, directions=None):
    kind = cfg.regularizer
    if kind == "ce":
        return ce_loss(net, x, y, cfg, rng)
    if kind == "l2":
        return l2_loss(net, x, y, cfg, rng)
    if kind == "cos":
        return cos_loss(net, x, y, cfg, rng)
    if kind == "l2cos":
        return combined_loss(net, x, y, cfg, rng)
    if kind == "hessian":
        return hessian_loss(net, x, y, cfg, rng)
    if kind == "maxent":
        return maxent_loss(net, x, y, cfg, rng)
    if kind == "atex":
        if teacher is None:
            raise ConfigError("regularizer: atex needs a teacher network")
        return atex_loss(teacher, net, x, y, cfg, rng, directions)
    return iga_loss(net, x, y, cfg, rng)


# -- optimization -----------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    first: list[np.ndarray] | None = None  # Adam m or SGD momentum buffer
    second: list[np.ndarray] | None = None  # Adam v


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def optimizer_step(net: Network, grads: Sequence[np.ndarray], state: OptimizerState, cfg: RunConfig,
                   lr: float | None = None) -> tuple[Network, OptimizerState]:
    """One SGD / Adam (coupled L2) / AdamW (decoupled decay) update; returns new objects."""
    lr = cfg.lr if lr is None else lr
    params = [p.data for p in net.parameters()]
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradients do not match the network parameters")
    wd = cfg.weight_decay
    t = state.step + 1
    if cfg.optimizer == "sgd":
        grads = [g + wd * p for g, p in zip(grads, params)]
        if cfg.momentum > 0:
            first = grads if state.first is None else [cfg.momentum * b + g for b, g in zip(state.first, grads)]
            direction = first
        else:
            first, direction = None, grads
        new = [p - lr * d for p, d in zip(params, direction)]
        return net.with_parameters(new), OptimizerState(t, first, None)
    b1, b2 = ADAM_BETAS
    if cfg.optimizer == "adam":
        grads = [g + wd * p for g, p in zip(grads, params)]
    else:
        params = [p * (1.0 - lr * wd) for p in params]
    m_prev = state.first or [np.zeros_like(p) for p in params]
    v_prev = state.second or [np.zeros_like(p) for p in params]
    m = [b1 * a + (1 - b1) * g for a, g in zip(m_prev, grads)]
    v = [b2 * a + (1 - b2) * g * g for a, g in zip(v_prev, grads)]
    new = [p - lr * (mi / (1 - b1 ** t)) / (np.sqrt(vi / (1 - b2 ** t)) + ADAM_EPS)
           for p, mi, vi in zip(params, m, v)]
    return net.with_parameters(new), OptimizerState(t, m, v)


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    """Step schedule: lr times decay for every milestone already reached (epochs count from 0)."""
    return cfg.lr * cfg.lr_decay ** sum(1 for m in cfg.milestones if m <= epoch)


def accuracy(net: Network, ds: Dataset, batch_size: int = 512) -> float:
    if len(ds) == 0:
        return float("nan")
    hits = 0
    for xb, yb in ds.batches(batch_size):
        hits += int((net.predict(xb) == yb).sum())
    return hits / len(ds)


def _check_finite(parts: dict[str, float], epoch: int, batch: int) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss component {name!r} is {value} at epoch {epoch}, batch {batch}")


def write_loss_log(records: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.epoch, repr(r.ce), repr(r.l2_term), repr(r.cos_term), repr(r.acc), f"{r.seconds:.6f}",
                        repr(r.other_term), repr(r.total), repr(r.lr)])
    return path


def train(net: Network, train_ds: Dataset, cfg: RunConfig, test_ds: Dataset | None = None,
          run_dir=None, teacher: Network | None = None, log=None) -> tuple[Network, TrainReport]:
    """Minibatch training; returns the final network and the per-epoch report.

    Accuracy is measured on ``test_ds`` (or the training set when absent).
    With ``run_dir`` the final checkpoint and a CSV loss log are written.
    ``log`` is an optional callable receiving each ``EpochRecord``.
    """
    cfg.validate()
    if cfg.regularizer in ("hessian",):
        require_twice_differentiable(net, "hessian regularizer")
    rng = np.random.default_rng(cfg.seed)
    directions = None
    if cfg.regularizer == "atex":
        if teacher is None:
            raise ConfigError("regularizer: atex needs a teacher network")
        u, degenerate = teacher_directions(teacher, train_ds.inputs, train_ds.labels, cfg)
    state = OptimizerState()
    report = TrainReport()
    eval_ds = test_ds if test_ds is not None else train_ds
    start = time.perf_counter()
    params = net.parameters()
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        tic = time.perf_counter()
        sums = dict.fromkeys(COMPONENTS, 0.0)
        seen = 0
        order = rng.permutation(len(train_ds))
        for b, begin in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[begin:begin + cfg.batch_size]
            xb, yb = train_ds.inputs[idx], train_ds.labels[idx]
            if cfg.regularizer == "atex":
                directions = (u[idx], degenerate[idx])
            loss, parts = compute_loss(net, xb, yb, cfg, rng, teacher, directions)
            _check_finite(parts, epoch, b)
            grads = grad(loss, params, allow_unused=True)
            net, state = optimizer_step(net, [g.data for g in grads], state, cfg, lr)
            params = net.parameters()
            for k in COMPONENTS:
                sums[k] += parts[k] * len(idx)
            seen += len(idx)
        seconds = time.perf_counter() - tic
        means = {k: sums[k] / max(seen, 1) for k in COMPONENTS}
        record = EpochRecord(epoch, means["ce"], means["l2_term"], means["cos_term"], means["other_term"],
                             sum(means.values()), accuracy(net, eval_ds), seconds, lr)
        report.epochs.append(record)
        if log is not None:
            log(record)
    report.wall_time = time.perf_counter() - start
    report.peak_memory_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        report.checkpoint = save_checkpoint(net, run_dir / "checkpoint.bin")
        report.log_path = write_loss_log(report.epochs, run_dir / "loss_log.csv")
    return net, report
