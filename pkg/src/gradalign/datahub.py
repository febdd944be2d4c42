"""Datasets: two moons, synthetic glyph images, and CIFAR-style binary batches."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_ROW_BYTES = 1 + 3 * 32 * 32
CIFAR_ROWS_PER_BATCH = 10000


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, *input_shape)
    labels: np.ndarray  # (N,)
    class_count: int
    low: np.ndarray = None  # per-channel lower bound
    high: np.ndarray = None
    split: str = "all"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        if self.low is None or self.high is None:
            self.low, self.high = channel_bounds(self.inputs)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.low, self.high

    def subset(self, index, split: str | None = None) -> "Dataset":
        index = np.asarray(index)
        inputs = self.inputs[index]
        low, high = channel_bounds(inputs, self.inputs.shape[1:])
        return replace(self, inputs=inputs, labels=self.labels[index], low=low, high=high,
                       split=split or self.split, meta=dict(self.meta))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.labels[idx]


def channel_bounds(inputs: np.ndarray, input_shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (axis 1) min and max; zeros for an empty set."""
    inputs = np.asarray(inputs, dtype=np.float64)
    shape = tuple(input_shape) if input_shape is not None else inputs.shape[1:]
    channels = shape[0] if shape else 1
    if inputs.shape[0] == 0:
        return np.zeros(channels), np.zeros(channels)
    moved = np.moveaxis(inputs, 1, 0).reshape(channels, -1)
    return moved.min(axis=1), moved.max(axis=1)


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:]), "train"), ds.subset(np.sort(order[:n_test]), "test")


# -- generators ----------------------------------------------------------------


def make_moons_2d(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaved unit half-circles with Gaussian jitter.

    Class 0 lies on (cos t, sin t), class 1 on (1 - cos t, 0.5 - sin t), t in [0, pi].
    """
    if n < 2:
        raise ValueError("make_moons_2d needs n >= 2")
    rng = np.random.default_rng(seed)
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    outer = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    inner = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    order = rng.permutation(n)
    return Dataset(x[order], y[order], 2, meta={"generator": "moons", "noise": noise, "seed": seed})


def _glyph(kind: int, side: int) -> np.ndarray:
    """Binary template for class ``kind`` drawn on a side x side canvas."""
    img = np.zeros((side, side))
    m = side // 4
    lo, hi = m, side - m - 1
    mid = side // 2
    r = np.arange(side)
    rr, cc = np.meshgrid(r, r, indexing="ij")
    k = kind % 10
    if k == 0:  # horizontal bar
        img[mid - 1:mid + 1, lo:hi + 1] = 1
    elif k == 1:  # vertical bar
        img[lo:hi + 1, mid - 1:mid + 1] = 1
    elif k == 2:  # main diagonal
        img[(np.abs(rr - cc) <= 1) & (rr >= lo) & (rr <= hi)] = 1
    elif k == 3:  # plus
        img[mid - 1:mid + 1, lo:hi + 1] = 1
        img[lo:hi + 1, mid - 1:mid + 1] = 1
    elif k == 4:  # square outline
        img[lo:hi + 1, lo:hi + 1] = 1
        img[lo + 2:hi - 1, lo + 2:hi - 1] = 0
    elif k == 5:  # filled small square
        img[mid - m // 2 - 1:mid + m // 2 + 1, mid - m // 2 - 1:mid + m // 2 + 1] = 1
    elif k == 6:  # ring
        d = np.sqrt((rr - (side - 1) / 2) ** 2 + (cc - (side - 1) / 2) ** 2)
        img[(d >= side / 4 - 1) & (d <= side / 4 + 0.5)] = 1
    elif k == 7:  # anti-diagonal
        img[(np.abs(rr + cc - (side - 1)) <= 1) & (rr >= lo) & (rr <= hi)] = 1
    elif k == 8:  # T shape
        img[lo:lo + 2, lo:hi + 1] = 1
        img[lo:hi + 1, mid - 1:mid + 1] = 1
    else:  # L shape
        img[lo:hi + 1, lo:lo + 2] = 1
        img[hi - 1:hi + 1, lo:hi + 1] = 1
    return img


def make_synthetic_digits(n: int, classes: int = 10, side: int = 16, seed: int = 0,
                          channels: int = 1, noise: float = 0.1, shift: int = 2) -> Dataset:
    """Glyph images (one template per class), randomly shifted, scaled and noised, in [0, 1]."""
    if side < 8:
        raise ValueError("make_synthetic_digits needs side >= 8")
    if not 1 <= classes <= 10:
        raise ValueError("classes must be in 1..10")
    rng = np.random.default_rng(seed)
    templates = [_glyph(k, side) for k in range(classes)]
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, channels, side, side))
    for i, lab in enumerate(labels):
        dy, dx = rng.integers(-shift, shift + 1, size=2)
        glyph = np.roll(templates[lab], (dy, dx), axis=(0, 1))
        intensity = rng.uniform(0.6, 1.0)
        background = rng.uniform(0.0, 0.3)
        tint = rng.uniform(0.8, 1.0, size=channels)
        img = background + (intensity - background) * glyph
        images[i] = tint[:, None, None] * img[None] + rng.normal(0.0, noise, size=(channels, side, side))
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, classes,
                   meta={"generator": "synthetic_digits", "side": side, "seed": seed, "channels": channels})


# -- CIFAR binary batches ---------------------------------------------------------


def load_cifar_binary(path, class_subset: Sequence[int] | None = None, per_class_limit: int | None = None,
                      standardize: bool = False, expect_rows: int | None = None) -> Dataset:
    """Read a CIFAR-10 binary batch (rows of 1 label byte + 3072 pixel bytes).

    Pixels are scaled to [0, 1].  With ``class_subset`` labels are remapped to
    0..k-1 in subset order; the first ``per_class_limit`` rows of each class
    are kept.  ``standardize`` applies per-channel zero-mean unit-variance
    scaling, and the dataset bounds follow it.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_ROW_BYTES:
        raise ValueError(
            f"{path}: size {len(raw)} bytes is not a positive multiple of the {CIFAR_ROW_BYTES}-byte row"
            " (truncated or not a CIFAR binary batch)"
        )
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_ROW_BYTES)
    if expect_rows is not None and len(rows) != expect_rows:
        raise ValueError(f"{path}: {len(rows)} rows, expected {expect_rows}")
    labels = rows[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte {labels.max()} out of range 0..9")
    subset = list(range(10)) if class_subset is None else [int(c) for c in class_subset]
    remap = {c: i for i, c in enumerate(subset)}
    keep, counts = [], {c: 0 for c in subset}
    for i, lab in enumerate(labels):
        if lab in remap and (per_class_limit is None or counts[lab] < per_class_limit):
            keep.append(i)
            counts[lab] += 1
    keep = np.asarray(keep, dtype=np.int64)
    pixels = rows[keep, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    new_labels = np.array([remap[c] for c in labels[keep]], dtype=np.int64)
    meta = {"source": str(path), "class_subset": subset, "standardized": standardize}
    if standardize and len(keep):
        mean = pixels.mean(axis=(0, 2, 3))
        std = pixels.std(axis=(0, 2, 3))
        pixels = (pixels - mean[None, :, None, None]) / std[None, :, None, None]
        meta.update(mean=mean.tolist(), std=std.tolist())
    return Dataset(pixels, new_labels, len(subset), meta=meta)


def save_cifar_binary(ds: Dataset, path, label_map: Sequence[int] | None = None) -> Path:
    """Encode a [0, 1] 3x32x32 dataset in the CIFAR binary layout."""
    if ds.input_shape != (3, 32, 32):
        raise ValueError(f"CIFAR layout needs 3x32x32 inputs, got {ds.input_shape}")
    labels = ds.labels if label_map is None else np.asarray(label_map)[ds.labels]
    rows = np.empty((len(ds), CIFAR_ROW_BYTES), dtype=np.uint8)
    rows[:, 0] = labels
    rows[:, 1:] = np.clip(np.rint(ds.inputs.reshape(len(ds), -1) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(rows.tobytes())
    return path


def export_dataset(ds: Dataset, directory) -> dict[str, Path]:
    """Write inputs/labels as flat little-endian arrays plus a text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inputs = directory / "inputs.f64"
    labels = directory / "labels.i64"
    inputs.write_bytes(ds.inputs.astype("<f8").tobytes())
    labels.write_bytes(ds.labels.astype("<i8").tobytes())
    manifest = directory / "manifest.txt"
    manifest.write_text(
        f"count {len(ds)}\n"
        f"input_shape {' '.join(str(s) for s in ds.input_shape)}\n"
        f"class_count {ds.class_count}\n"
        f"low {' '.join(repr(float(v)) for v in ds.low)}\n"
        f"high {' '.join(repr(float(v)) for v in ds.high)}\n"
        f"split {ds.split}\n"
        + "".join(f"meta.{k} {v}\n" for k, v in sorted(ds.meta.items()))
    )
    return {"inputs": inputs, "labels": labels, "manifest": manifest}
