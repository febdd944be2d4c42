"""Attribution similarity measures, random perturbation similarity and insertion games."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attributions import DIFFERENTIABLE_METHODS, attribute, spatial_map
from .autodiff import no_grad, ops
from .datahub import Dataset
from .netzoo import Network

MEASURES = ("cossim", "pcc", "ssim")
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GAMMA_GRID = tuple(np.round(np.linspace(0.0, 1.0, 21), 10))
RPS_COLUMNS = ("method", "measure", "epsilon", "rps", "n_samples", "seed")
INSERTION_COLUMNS = ("curve", "gamma", "mean_probability")


class UndefinedSimilarityError(ValueError):
    """Correlation of a constant map."""


# -- similarity ----------------------------------------------------------------


def cossim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pcc(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("pcc is undefined for a constant map")
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))


def _minmax(s: np.ndarray) -> np.ndarray:
    lo, hi = s.min(), s.max()
    return (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)


def ssim(a, b) -> float:
    """Mean SSIM over valid uniform windows of the channel-summed, min-max-normalized maps.

    The window side is 7, shrunk to the smaller spatial dimension for tiny
    maps.  Statistics use population (biased) variances and data range 1.
    """
    a = _minmax(spatial_map(a))
    b = _minmax(spatial_map(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    win = (min(SSIM_WINDOW, a.shape[0]), min(SSIM_WINDOW, a.shape[1]))
    wa = sliding_window_view(a, win)
    wb = sliding_window_view(b, win)
    axes = (-2, -1)
    mu_a, mu_b = wa.mean(axis=axes), wb.mean(axis=axes)
    var_a = (wa * wa).mean(axis=axes) - mu_a ** 2
    var_b = (wb * wb).mean(axis=axes) - mu_b ** 2
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


_MEASURE_FNS = {"cossim": cossim, "pcc": pcc, "ssim": ssim}


def similarity(a, b, kind: str = "cossim") -> float:
    """Similarity of two single maps (no batch axis)."""
    a = getattr(a, "scores", a)
    b = getattr(b, "scores", b)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"similarity: shape mismatch {a.shape} vs {b.shape}")
    if kind not in _MEASURE_FNS:
        raise ValueError(f"unknown measure {kind!r}; choose from {MEASURES}")
    return _MEASURE_FNS[kind](a, b)


def batch_similarity(a: np.ndarray, b: np.ndarray, kind: str = "cossim") -> np.ndarray:
    """Per-sample similarity of two (N, ...) map batches."""
    a = getattr(a, "scores", a)
    b = getattr(b, "scores", b)
    return np.array([similarity(ai, bi, kind) for ai, bi in zip(a, b)])


# -- random perturbation similarity ---------------------------------------------


def rps(net: Network, ds: Dataset, method: str = "grad", measure: str = "cossim", epsilon: float = 8 / 255,
        n_samples: int = 10, seed: int = 0, batch_size: int = 256, **attr_kwargs) -> float:
    """Mean over samples and uniform draws of similarity(h(x + delta), h(x))."""
    if len(ds) == 0:
        raise ValueError("rps: empty dataset")
    if epsilon < 0:
        raise ValueError("rps: epsilon must be >= 0")
    return float(rps_values(net, ds, method, measure, epsilon, n_samples, seed, batch_size, **attr_kwargs).mean())


def rps_values(net: Network, ds: Dataset, method: str = "grad", measure: str = "cossim", epsilon: float = 8 / 255,
               n_samples: int = 10, seed: int = 0, batch_size: int = 256, **attr_kwargs) -> np.ndarray:
    """Per-sample RPS (mean over the draws)."""
    rng = np.random.default_rng(seed)
    if method == "lrp":
        attr_kwargs.setdefault("bounds", (ds.low, ds.high))
    out = np.zeros(len(ds))
    for start in range(0, len(ds), batch_size):
        x = ds.inputs[start:start + batch_size]
        y = ds.labels[start:start + batch_size]
        base = attribute(net, x, y, method, **attr_kwargs).scores
        for _ in range(n_samples):
            delta = rng.uniform(-epsilon, epsilon, size=x.shape)
            moved = attribute(net, x + delta, y, method, **attr_kwargs).scores
            out[start:start + len(x)] += batch_similarity(moved, base, measure)
    return out / n_samples


# -- insertion game ----------------------------------------------------------------


@dataclass
class InsertionCurve:
    gammas: np.ndarray
    probabilities: np.ndarray

    @property
    def mean_over_gamma(self) -> float:
        return float(np.mean(self.probabilities))

    def display(self, percent: bool = True) -> float:
        return self.mean_over_gamma * (100.0 if percent else 1.0)


def insertion_mask(scores, gamma: float) -> np.ndarray:
    """Boolean mask of the round(gamma * d) highest scores (half-up; ties go to the lower index)."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    s = np.asarray(scores, dtype=np.float64)
    d = s.size
    k = int(np.floor(gamma * d + 0.5))
    order = np.argsort(-s.ravel(), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(s.shape)


def _probabilities(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with no_grad():
        p = ops.softmax(net.forward(x), axis=-1).data
    return p[np.arange(len(y)), y]


def insertion_from_maps(net: Network, x: np.ndarray, y: np.ndarray, maps: np.ndarray,
                        gammas: Sequence[float] = GAMMA_GRID, baseline: float = 0.0) -> InsertionCurve:
    """Curve for explicit ordering maps; reconstruction x_g = where(mask, x, baseline)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    gammas = np.asarray(gammas, dtype=np.float64)
    probs = np.zeros(len(gammas))
    for j, g in enumerate(gammas):
        masks = np.stack([insertion_mask(m, g) for m in maps]) if len(maps) else np.zeros_like(x, dtype=bool)
        xg = np.where(masks, x, baseline)
        probs[j] = _probabilities(net, xg, y).mean()
    return InsertionCurve(gammas, probs)


def insertion_curve(net: Network, ds: Dataset, method: str = "grad", gammas: Sequence[float] = GAMMA_GRID,
                    **attr_kwargs) -> InsertionCurve:
    """Insert features from the zero image in the order of h(x)."""
    if len(ds) == 0:
        raise ValueError("insertion_curve: empty dataset")
    if method == "lrp":
        attr_kwargs.setdefault("bounds", (ds.low, ds.high))
    maps = attribute(net, ds.inputs, ds.labels, method, **attr_kwargs).scores
    return insertion_from_maps(net, ds.inputs, ds.labels, maps, gammas)


def adv_insertion_curve(net: Network, ds: Dataset, method: str, attack_cfg, gammas: Sequence[float] = GAMMA_GRID,
                        reconstruct: str = "clean", attack_method: str | None = None,
                        **attr_kwargs) -> InsertionCurve:
    """Insertion ordered by h(x_adv) after a targeted manipulation.

    ``reconstruct`` chooses which pixels are inserted: ``clean`` (x) or
    ``adversarial`` (x_adv).  Differentiable methods are attacked directly;
    LRP and SmoothGrad are measured on an x_adv produced against
    ``attack_method`` (default: plain gradient).
    """
    from .attack import run_attack

    if len(ds) == 0:
        raise ValueError("adv_insertion_curve: empty dataset")
    if reconstruct not in ("clean", "adversarial"):
        raise ValueError(f"reconstruct must be 'clean' or 'adversarial', got {reconstruct!r}")
    if method == "lrp":
        attr_kwargs.setdefault("bounds", (ds.low, ds.high))
    if attack_method is None:
        attack_method = method if method in DIFFERENTIABLE_METHODS else "grad"
    result = run_attack(net, ds.inputs, ds.labels, attack_cfg, method=attack_method)
    maps = attribute(net, result.x_adv, ds.labels, method, **attr_kwargs).scores
    source = ds.inputs if reconstruct == "clean" else result.x_adv
    return insertion_from_maps(net, source, ds.labels, maps, gammas)


# -- CSV -----------------------------------------------------------------------------


def write_rps_table(rows: Sequence[dict], path) -> Path:
    """Rows with keys ``RPS_COLUMNS``; written in the given order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RPS_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in RPS_COLUMNS})
    return path


def write_insertion_csv(curves: dict[str, InsertionCurve], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INSERTION_COLUMNS)
        for name, curve in curves.items():
            for g, p in zip(curve.gammas, curve.probabilities):
                w.writerow([name, repr(float(g)), repr(float(p))])
    return path
