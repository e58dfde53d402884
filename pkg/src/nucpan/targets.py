"""Instance training targets: three-label maps and center-point vectors."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

BACKGROUND, INTERIOR, BOUNDARY = 0, 1, 2

__all__ = [
    "BACKGROUND",
    "INTERIOR",
    "BOUNDARY",
    "encode_three_label",
    "encode_center_vectors",
    "instance_classes",
]


def encode_three_label(inst: np.ndarray, boundary_width: int = 2) -> np.ndarray:
    """Encode an instance map as background / interior / boundary.

    A foreground pixel is boundary when some pixel within Chebyshev distance
    ``boundary_width`` carries a different label. Other instances and the
    area beyond the image border both count as "outside", so touching
    instances each keep their own boundary along the shared edge.

    Instances thinner than ``2 * boundary_width`` end up without interior.
    """
    if boundary_width < 1:
        raise ValueError("boundary_width must be >= 1")
    inst = np.asarray(inst)
    size = 2 * boundary_width + 1
    lo = ndimage.minimum_filter(inst, size=size, mode="constant", cval=0)
    hi = ndimage.maximum_filter(inst, size=size, mode="constant", cval=0)
    fg = inst > 0
    out = np.zeros(inst.shape, dtype=np.uint8)
    edge = (lo != inst) | (hi != inst)
    out[fg & edge] = BOUNDARY
    out[fg & ~edge] = INTERIOR
    return out


def encode_center_vectors(inst: np.ndarray) -> np.ndarray:
    """Per-pixel offset ``centroid - pixel`` as an ``(H, W, 2)`` (dy, dx) field.

    Zero on background. Offsets are in raw pixel units.
    """
    inst = np.asarray(inst)
    h, w = inst.shape
    out = np.zeros((h, w, 2), dtype=np.float32)
    fg = inst > 0
    if not fg.any():
        return out
    ids = inst[fg].astype(np.int64)
    ys, xs = np.nonzero(fg)
    n = np.bincount(ids)
    n_safe = np.maximum(n, 1)
    cy = np.bincount(ids, weights=ys) / n_safe
    cx = np.bincount(ids, weights=xs) / n_safe
    out[ys, xs, 0] = cy[ids] - ys
    out[ys, xs, 1] = cx[ids] - xs
    return out


def instance_classes(inst: np.ndarray, sem: np.ndarray) -> dict[int, int]:
    """Majority semantic class of every instance (ties to the lower class)."""
    inst = np.asarray(inst)
    sem = np.asarray(sem)
    fg = inst > 0
    out: dict[int, int] = {}
    if not fg.any():
        return out
    ids = inst[fg].astype(np.int64)
    cls = sem[fg].astype(np.int64)
    n_cls = int(cls.max()) + 1
    table = np.zeros((int(ids.max()) + 1, n_cls), dtype=np.int64)
    np.add.at(table, (ids, cls), 1)
    for i in np.unique(ids):
        out[int(i)] = int(np.argmax(table[i]))
    return out
