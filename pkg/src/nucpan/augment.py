"""Color deconvolution, training augmentation and test-time augmentation.

Spatial transforms are the eight elements of the dihedral group of the
square, indexed ``0..7``: index ``k`` applies an optional left-right flip
(``k >= 4``) followed by ``k % 4`` clockwise quarter turns.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .sampler import make_rng

# Ruifrok & Johnston H, E, DAB optical-density vectors (RGB order).
RUIFROK_HED = ((0.65, 0.70, 0.29), (0.07, 0.99, 0.11), (0.27, 0.57, 0.78))
LOG_FLOOR = 1e-6

DIHEDRAL_NAMES = ("id", "rot90", "rot180", "rot270", "flip", "flip_rot90", "flip_rot180",
                  "flip_rot270")


@dataclass(frozen=True)
class StainBasis:
    """Rows are unit-normalized stain OD vectors; ``inverse`` maps OD to stains."""

    matrix: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_vectors(cls, vectors=RUIFROK_HED) -> "StainBasis":
        m = np.asarray(vectors, dtype=np.float64)
        m = m / np.linalg.norm(m, axis=1, keepdims=True)
        if abs(np.linalg.det(m)) < 1e-8:
            raise ValueError("stain vectors are not linearly independent")
        return cls(matrix=m, inverse=np.linalg.inv(m))


DEFAULT_BASIS = StainBasis.from_vectors()


def rgb_to_hed(img: np.ndarray, basis: StainBasis = DEFAULT_BASIS) -> np.ndarray:
    """RGB in [0, 1] to per-pixel stain concentrations (H, E, D)."""
    img = np.asarray(img)
    od = -np.log(np.maximum(img.astype(np.float64), LOG_FLOOR))
    return (od @ basis.inverse).astype(np.float32)


def hed_to_rgb(hed: np.ndarray, basis: StainBasis = DEFAULT_BASIS) -> np.ndarray:
    """Inverse of :func:`rgb_to_hed` (Beer-Lambert reconstruction)."""
    od = np.asarray(hed, dtype=np.float64) @ basis.matrix
    return np.exp(-od).astype(np.float32)


def scale_stains(img: np.ndarray, scales, basis: StainBasis = DEFAULT_BASIS) -> np.ndarray:
    """Multiply each stain concentration by its factor and return RGB."""
    scales = np.asarray(scales, dtype=np.float64)
    if np.all(scales == 1.0):
        return np.asarray(img, dtype=np.float32)
    return np.clip(hed_to_rgb(rgb_to_hed(img, basis) * scales, basis), 0.0, 1.0)


# --------------------------------------------------------------------------
# dihedral transforms
# --------------------------------------------------------------------------

def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral element ``k`` to the two leading (spatial) axes of ``a``."""
    if k >= 4:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, -(k % 4), axes=(0, 1)))


def dihedral_inverse(a: np.ndarray, k: int) -> np.ndarray:
    a = np.rot90(a, k % 4, axes=(0, 1))
    if k >= 4:
        a = a[:, ::-1]
    return np.ascontiguousarray(a)


def dihedral_vectors(vec: np.ndarray, k: int) -> np.ndarray:
    """Transform a (dy, dx) displacement field together with the grid."""
    out = dihedral(vec, k).copy()
    dy, dx = out[..., 0].copy(), out[..., 1].copy()
    if k >= 4:
        dx = -dx
    for _ in range(k % 4):
        # one clockwise quarter turn maps (dy, dx) to (dx, -dy)
        dy, dx = dx, -dy
    out[..., 0] = dy
    out[..., 1] = dx
    return out


# --------------------------------------------------------------------------
# training augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Ranges are half-widths around identity; all zeros means no change."""

    hed_contrast: float = 0.0      # stain scale drawn from [1-a, 1+a]
    rgb_brightness: float = 0.0    # additive offset per channel
    rgb_contrast: float = 0.0      # multiplicative factor per channel around the mean
    blur_prob: float = 0.0
    blur_sigma_max: float = 1.0
    noise_std: float = 0.0
    dihedral: bool = False
    max_translate: int = 0

    @classmethod
    def default(cls) -> "AugmentConfig":
        return cls(hed_contrast=0.1, rgb_brightness=0.03, rgb_contrast=0.05, blur_prob=0.2,
                   blur_sigma_max=0.8, noise_std=0.01, dihedral=True, max_translate=4)


@dataclass
class TrainTargets:
    """Spatial training targets that move with the image."""

    inst: np.ndarray
    sem: np.ndarray
    tri: np.ndarray
    vec: np.ndarray

    def arrays(self):
        return self.inst, self.sem, self.tri, self.vec


def _shift(a: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    out = np.full_like(a, fill)
    h, w = a.shape[:2]
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[ys_dst, xs_dst] = a[ys_src, xs_src]
    return out


def photometric(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                basis: StainBasis = DEFAULT_BASIS) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if cfg.hed_contrast > 0:
        scales = rng.uniform(1 - cfg.hed_contrast, 1 + cfg.hed_contrast, size=3)
        img = scale_stains(img, scales, basis)
    if cfg.rgb_contrast > 0 or cfg.rgb_brightness > 0:
        c = rng.uniform(1 - cfg.rgb_contrast, 1 + cfg.rgb_contrast, size=3)
        b = rng.uniform(-cfg.rgb_brightness, cfg.rgb_brightness, size=3)
        mean = img.mean(axis=(0, 1))
        img = np.clip((img - mean) * c + mean + b, 0.0, 1.0).astype(np.float32)
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        sigma = rng.uniform(0.0, cfg.blur_sigma_max)
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    if cfg.noise_std > 0:
        img = np.clip(img + rng.normal(0.0, cfg.noise_std, size=img.shape), 0.0, 1.0)
    return img.astype(np.float32, copy=False)


def augment_train(img: np.ndarray, targets: TrainTargets, config: AugmentConfig, seed: int,
                  basis: StainBasis = DEFAULT_BASIS):
    """Randomly augment one training sample.

    Photometric changes touch the image only. Spatial changes (dihedral,
    integer translation) move image and all targets together; center
    vectors are rotated/reflected with the grid.
    """
    rng = make_rng(seed)
    img = photometric(img, config, rng, basis)
    inst, sem, tri, vec = targets.arrays()
    if config.dihedral:
        k = int(rng.integers(8))
        img = dihedral(img, k)
        inst, sem, tri = dihedral(inst, k), dihedral(sem, k), dihedral(tri, k)
        vec = dihedral_vectors(vec, k)
    if config.max_translate > 0:
        dy, dx = (int(v) for v in rng.integers(-config.max_translate, config.max_translate + 1,
                                                size=2))
        if dy or dx:
            img = ndimage.shift(img, (dy, dx, 0), order=0, mode="nearest")
            inst, sem, tri, vec = (_shift(a, dy, dx) for a in (inst, sem, tri, vec))
    return np.ascontiguousarray(img, dtype=np.float32), TrainTargets(inst, sem, tri, vec)


# --------------------------------------------------------------------------
# test-time augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TTAPass:
    transform: int
    hed_scales: tuple = (1.0, 1.0, 1.0)
    dropout_seed: int | None = None
    model_index: int = 0


@dataclass(frozen=True)
class TTAPlan:
    passes: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.passes)


def make_tta_plan(n_passes: int = 16, seed: int = 0, hed_range: float = 0.1,
                  n_models: int = 1, mc_dropout: bool = True) -> TTAPlan:
    """Random flips/quarter-turns, stain scales in ``[1-r, 1+r]`` and dropout seeds.

    Passes cycle through the models, so an ensemble is averaged like extra
    augmentation passes of a single model.
    """
    rng = make_rng(seed)
    passes = []
    for i in range(n_passes):
        k = int(rng.integers(8))
        scales = tuple(float(s) for s in rng.uniform(1 - hed_range, 1 + hed_range, size=3))
        dseed = int(rng.integers(2**31)) if mc_dropout else None
        passes.append(TTAPass(transform=k, hed_scales=scales, dropout_seed=dseed,
                              model_index=i % n_models))
    return TTAPlan(tuple(passes))


def identity_plan(n_passes: int = 1) -> TTAPlan:
    return TTAPlan(tuple(TTAPass(transform=0) for _ in range(n_passes)))


ModelFn = Callable[[np.ndarray, "int | None"], "tuple[np.ndarray, np.ndarray]"]


def tta_average(model_fn: ModelFn | Sequence[ModelFn], img: np.ndarray, plan: TTAPlan,
                basis: StainBasis = DEFAULT_BASIS):
    """Average probability planes over the passes of ``plan``.

    ``model_fn(image, dropout_seed)`` returns ``(semantic_probs, tri_probs)``,
    both ``(H, W, C)``. A sequence of model functions is indexed by each
    pass's ``model_index``. Outputs are mapped back through the exact inverse
    transform before averaging.
    """
    if len(plan) == 0:
        raise ValueError("TTA plan has no passes")
    fns = list(model_fn) if isinstance(model_fn, Sequence) else [model_fn]
    sem_acc = tri_acc = None
    for p in plan.passes:
        x = scale_stains(img, p.hed_scales, basis)
        x = dihedral(x, p.transform)
        sem, tri = fns[p.model_index](x, p.dropout_seed)
        sem = dihedral_inverse(np.asarray(sem, dtype=np.float64), p.transform)
        tri = dihedral_inverse(np.asarray(tri, dtype=np.float64), p.transform)
        sem_acc = sem if sem_acc is None else sem_acc + sem
        tri_acc = tri if tri_acc is None else tri_acc + tri
    n = len(plan)
    return (sem_acc / n).astype(np.float32), (tri_acc / n).astype(np.float32)
