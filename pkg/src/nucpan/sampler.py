"""Image-level importance sampling for class-imbalanced training sets.

Each image gets a draw probability equal to the class-averaged share it holds
of every class's total occupancy, so images that contain rare classes are
drawn far more often than their count suggests.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

#: Bit generator used for every seeded draw in the package.
RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def occupancy(masks: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Per-image class occupancy table of shape ``(N, num_classes)``.

    Entry ``[n, c]`` is the fraction of pixels of image ``n`` labeled ``c``.
    """
    if len(masks) == 0:
        raise ValueError("occupancy needs at least one image")
    shape = np.shape(masks[0])
    table = np.zeros((len(masks), num_classes), dtype=np.float64)
    for n, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != shape:
            raise ValueError(f"image {n} has shape {m.shape}, expected {shape}")
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"image {n} has class indices outside [0, {num_classes})")
        table[n] = np.bincount(m.ravel().astype(np.int64), minlength=num_classes) / m.size
    return table


def sampling_distribution(occ: np.ndarray) -> np.ndarray:
    """Draw probability per image from an occupancy table.

    Classes with zero total occupancy over the dataset are left out of the
    class average.
    """
    occ = np.asarray(occ, dtype=np.float64)
    if occ.ndim != 2 or occ.shape[0] == 0:
        raise ValueError("occupancy table must be a non-empty (N, C) array")
    totals = occ.sum(axis=0)
    present = totals > 0
    if not present.any():
        raise ValueError("occupancy table is all zeros")
    share = occ[:, present] / totals[present]
    p = share.mean(axis=1)
    return p / p.sum()


def draw_epoch(dist: np.ndarray, epoch_size: int, seed: int) -> np.ndarray:
    """Draw ``epoch_size`` image indices i.i.d. from ``dist`` (with replacement)."""
    if epoch_size < 1:
        raise ValueError("epoch_size must be >= 1")
    dist = np.asarray(dist, dtype=np.float64)
    rng = make_rng(seed)
    # Inverse-CDF lookup keeps the draw a pure function of (dist, seed).
    cdf = np.cumsum(dist)
    cdf /= cdf[-1]
    u = rng.random(epoch_size)
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, len(dist) - 1)


def occupancy_csv(occ: np.ndarray, p: np.ndarray, image_ids: Sequence[str] | None = None) -> str:
    """Render the ``sample-stats`` CSV (image_id, X_0..X_{C-1}, p_n)."""
    n, c = occ.shape
    ids = list(image_ids) if image_ids is not None else [str(i) for i in range(n)]
    lines = [",".join(["image_id"] + [f"X_{k}" for k in range(c)] + ["p_n"])]
    for i in range(n):
        row = [ids[i]] + [repr(float(v)) for v in occ[i]] + [repr(float(p[i]))]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
