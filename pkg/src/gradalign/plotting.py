"""Figures written next to the CSV outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attributions import spatial_map  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curves(records, path) -> Path:
    epochs = [r.epoch for r in records]
    fig, (ax, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("ce", "l2_term", "cos_term", "other_term", "total"):
        values = [getattr(r, name) for r in records]
        if any(values):
            ax.plot(epochs, values, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax_acc.plot(epochs, [r.acc for r in records], color="k")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    return _save(fig, path)


def plot_rps(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    keys = sorted({(r["method"], r["measure"]) for r in rows})
    for method, measure in keys:
        sel = sorted((r["epsilon"], r["rps"]) for r in rows if r["method"] == method and r["measure"] == measure)
        ax.plot([e * 255 for e, _ in sel], [v for _, v in sel], marker="o", label=f"{method}/{measure}")
    ax.set_xlabel("epsilon x 255")
    ax.set_ylabel("RPS")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_insertion(curves: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        ax.plot(curve.gammas, curve.probabilities, label=f"{name} ({curve.mean_over_gamma:.3f})")
    ax.set_xlabel("gamma")
    ax.set_ylabel("mean p_y")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_surface(xs: np.ndarray, ys: np.ndarray, values: np.ndarray, grads: np.ndarray, path,
                 points: np.ndarray | None = None, pair: np.ndarray | None = None, title: str = "") -> Path:
    """Level curves of ``values`` (ny, nx) with a subsampled gradient field."""
    fig, ax = plt.subplots(figsize=(5, 4.5))
    cs = ax.contourf(xs, ys, values, levels=20, cmap="coolwarm")
    ax.contour(xs, ys, values, levels=[0.0], colors="k", linewidths=1)
    fig.colorbar(cs, ax=ax)
    step = max(1, len(xs) // 15)
    ax.quiver(xs[::step], ys[::step], grads[::step, ::step, 0], grads[::step, ::step, 1], color="0.2")
    if points is not None:
        ax.scatter(points[:, 0], points[:, 1], s=4, c="k", alpha=0.3)
    if pair is not None:
        ax.scatter(pair[:, 0], pair[:, 1], s=30, c="yellow", edgecolors="k")
    ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_bound_sweep(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    eps = [r["epsilon"] for r in rows]
    ax.loglog(eps, [max(r["mean_crc"], 1e-300) for r in rows], marker="o", label="measured CRC")
    ax.loglog(eps, [max(r["mean_bound"], 1e-300) for r in rows], marker="s", label="bound term")
    ax.set_xlabel("epsilon")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_maps(images: np.ndarray, maps: Sequence[np.ndarray], titles: Sequence[str], path) -> Path:
    """One row per sample: the input followed by each map (channel-summed)."""
    n = len(images)
    cols = 1 + len(maps)
    fig, axes = plt.subplots(n, cols, figsize=(1.8 * cols, 1.8 * n), squeeze=False)
    for i in range(n):
        img = images[i]
        shown = img.transpose(1, 2, 0) if img.ndim == 3 and img.shape[0] == 3 else spatial_map(img)
        axes[i, 0].imshow(np.clip(shown, 0, 1) if shown.ndim == 3 else shown, cmap="gray")
        for j, m in enumerate(maps):
            axes[i, j + 1].imshow(spatial_map(m[i]), cmap="inferno")
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    for j, t in enumerate(["input", *titles]):
        axes[0, j].set_title(t, fontsize=8)
    return _save(fig, path)
