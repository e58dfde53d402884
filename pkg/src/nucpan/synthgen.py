"""Synthetic H&E-like tiles with a realistic nucleus class imbalance.

Nuclei are non-overlapping ellipses whose class frequencies and area
statistics default to the Lizard tile statistics (six nucleus types, 256x256
tiles at 0.5 um/px). Tiles are painted in stain space and converted to RGB
with the Beer-Lambert model, so ground truth is exact by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imagecore
from .augment import DEFAULT_BASIS, hed_to_rgb
from .metrics import NUM_CLASSES
from .sampler import make_rng
from .targets import encode_three_label

# Lizard tile statistics, class order neu, epi, lym, pla, eos, con.
INSTANCE_SHARE = (0.89, 49.50, 21.22, 5.61, 0.68, 22.10)
MEAN_AREA = (80.78, 119.29, 50.06, 56.30, 87.97, 79.86)
STD_AREA = (41.71, 72.82, 19.60, 22.86, 45.91, 49.54)
NUCLEUS_PIXEL_SHARE = 1.0 - 0.8397

# Stain concentrations (H, E) per class; index 0 is the tissue background.
STAIN_HE = ((0.08, 0.35), (1.00, 0.70), (0.70, 0.30), (1.40, 0.10), (1.25, 0.45), (0.60, 1.00),
            (0.95, 0.12))
ASPECT = (1.0, 1.3, 1.5, 1.1, 1.15, 1.3, 2.5)


class SceneError(RuntimeError):
    """The requested nucleus density could not be placed."""


@dataclass(frozen=True)
class SceneConfig:
    size: int = 256
    class_share: tuple = INSTANCE_SHARE
    mean_area: tuple = MEAN_AREA
    std_area: tuple = STD_AREA
    density: float = NUCLEUS_PIXEL_SHARE   # target fraction of nucleus pixels
    min_area: int = 6
    min_gap: int = 1
    stain_he: tuple = STAIN_HE
    aspect: tuple = ASPECT
    instance_jitter: float = 0.08          # relative std of per-nucleus stain amounts
    pixel_noise: float = 0.04              # std of per-pixel stain noise
    notch_prob: float = 0.0                # share of nuclei with a concave notch
    max_attempts: int = 60
    max_failures: int = 40
    seed: int = 0

    def __post_init__(self):
        share = np.asarray(self.class_share, dtype=np.float64)
        if len(share) != NUM_CLASSES - 1 or np.any(share < 0) or share.sum() <= 0:
            raise ValueError("class_share needs one non-negative entry per nucleus class")
        if np.any(np.asarray(self.mean_area) <= 0) or np.any(np.asarray(self.std_area) < 0):
            raise ValueError("areas must be positive")
        if not 0.0 <= self.density < 1.0:
            raise ValueError("density must lie in [0, 1)")

    @property
    def class_probs(self) -> np.ndarray:
        share = np.asarray(self.class_share, dtype=np.float64)
        return share / share.sum()


@dataclass
class Scene:
    image: np.ndarray       # (H, W, 3) float32 RGB in [0, 1]
    inst: np.ndarray        # (H, W) int32
    sem: np.ndarray         # (H, W) uint8
    counts: np.ndarray      # per nucleus class
    classes: dict = field(default_factory=dict)


def _lognormal_area(rng, mean, std):
    if std == 0:
        return mean
    s2 = math.log1p((std / mean) ** 2)
    return float(rng.lognormal(math.log(mean) - s2 / 2, math.sqrt(s2)))


def ellipse_mask(area: float, aspect: float, angle: float, notch: float | None = None):
    """Digitized ellipse of roughly ``area`` pixels, cropped to its bounding box.

    ``notch`` (an angle) removes a 90-degree wedge from the outer part of the
    ellipse. The result is 8-connected and hole-free.
    """
    a = math.sqrt(area * aspect / math.pi)
    b = math.sqrt(area / (math.pi * aspect))
    r = int(math.ceil(a)) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    ca, sa = math.cos(angle), math.sin(angle)
    u = xx * ca + yy * sa
    v = -xx * sa + yy * ca
    m = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    m[r, r] = True
    if notch is not None:
        phi = np.arctan2(yy, xx)
        d = np.angle(np.exp(1j * (phi - notch)))
        rad = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        m &= ~((np.abs(d) < math.pi / 4) & (rad > 0.35))
    cc = imagecore.connected_components(m, connectivity=8)
    if cc.max() > 1:
        sizes = np.bincount(cc.ravel())
        sizes[0] = 0
        m = cc == int(np.argmax(sizes))
    m = imagecore.fill_holes(m)
    ys, xs = np.nonzero(m)
    return m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def generate(config: SceneConfig) -> Scene:
    """Render one tile. Deterministic for a given config (including seed)."""
    rng = make_rng(config.seed)
    n = config.size
    inst = np.zeros((n, n), dtype=np.int32)
    sem = np.zeros((n, n), dtype=np.uint8)
    blocked = np.zeros((n, n), dtype=bool)
    probs = config.class_probs
    target = config.density * n * n
    covered = 0
    failures = 0
    label = 0
    counts = np.zeros(NUM_CLASSES - 1, dtype=np.int64)
    gap = ndimage.generate_binary_structure(2, 2)
    while covered < target:
        cls = int(rng.choice(len(probs), p=probs)) + 1
        area = max(config.min_area, _lognormal_area(rng, config.mean_area[cls - 1],
                                                    config.std_area[cls - 1]))
        notch = float(rng.uniform(-math.pi, math.pi)) if rng.random() < config.notch_prob else None
        mask = ellipse_mask(area, config.aspect[cls], float(rng.uniform(0, math.pi)), notch)
        mh, mw = mask.shape
        placed = False
        if mh < n and mw < n:
            for _ in range(config.max_attempts):
                y = int(rng.integers(0, n - mh + 1))
                x = int(rng.integers(0, n - mw + 1))
                if not np.any(blocked[y:y + mh, x:x + mw] & mask):
                    placed = True
                    break
        if not placed:
            failures += 1
            if failures > config.max_failures:
                raise SceneError(
                    f"could not reach nucleus density {config.density:.3f} on a {n}x{n} tile "
                    f"(reached {covered / (n * n):.3f} after {failures} failed placements)")
            continue
        label += 1
        sl = (slice(y, y + mh), slice(x, x + mw))
        inst[sl][mask] = label
        sem[sl][mask] = cls
        # keep-out zone: the mask grown by min_gap, clipped to the tile
        pad = config.min_gap
        gy0, gx0 = max(0, y - pad), max(0, x - pad)
        big = np.zeros((mh + 2 * pad, mw + 2 * pad), dtype=bool)
        big[pad:pad + mh, pad:pad + mw] = mask
        if pad:
            big = ndimage.binary_dilation(big, gap, iterations=pad)
        by0, bx0 = gy0 - (y - pad), gx0 - (x - pad)
        gy1, gx1 = min(n, y + mh + pad), min(n, x + mw + pad)
        blocked[gy0:gy1, gx0:gx1] |= big[by0:by0 + gy1 - gy0, bx0:bx0 + gx1 - gx0]
        covered += int(mask.sum())
        counts[cls - 1] += 1

    image = render(inst, sem, config, rng)
    classes = {i + 1: 0 for i in range(label)}
    if label:
        ids = inst[inst > 0]
        cl = sem[inst > 0]
        for i, c in zip(ids.tolist(), cl.tolist()):
            classes[i] = c
    return Scene(image=image, inst=inst, sem=sem, counts=counts, classes=classes)


def render(inst: np.ndarray, sem: np.ndarray, config: SceneConfig, rng) -> np.ndarray:
    """Paint stain concentrations per pixel and convert to RGB."""
    n_h, n_w = inst.shape
    stains = np.asarray(config.stain_he, dtype=np.float64)
    hed = np.zeros((n_h, n_w, 3))
    hed[..., 0] = stains[0, 0]
    hed[..., 1] = stains[0, 1]
    n_inst = int(inst.max())
    if n_inst:
        jitter = 1.0 + config.instance_jitter * rng.standard_normal((n_inst + 1, 2))
        fg = inst > 0
        cls = sem[fg].astype(np.int64)
        ids = inst[fg]
        hed[fg, 0] = stains[cls, 0] * jitter[ids, 0]
        hed[fg, 1] = stains[cls, 1] * jitter[ids, 1]
    hed[..., :2] += config.pixel_noise * rng.standard_normal((n_h, n_w, 2))
    hed = np.clip(hed, 0.0, None)
    return np.clip(hed_to_rgb(hed, DEFAULT_BASIS), 0.0, 1.0).astype(np.float32)


def generate_corpus(n_tiles: int, config: SceneConfig | None = None, seed: int = 0) -> list[Scene]:
    """``n_tiles`` scenes with per-tile seeds derived from ``seed``."""
    config = config or SceneConfig()
    seeds = np.random.SeedSequence(seed).generate_state(n_tiles, dtype=np.uint32)
    out = []
    for s in seeds:
        cfg = SceneConfig(**{**config.__dict__, "seed": int(s)})
        out.append(generate(cfg))
    return out


# --------------------------------------------------------------------------
# simulated network output
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """Corruptions applied to ground truth to mimic imperfect network output."""

    blur: float = 0.8
    pixel_noise: float = 0.08
    small_blobs: int = 6          # spurious tiny detections per tile
    concave_blobs: int = 3        # spurious crescent-shaped detections per tile
    class_confidence: float = 0.7
    seed: int = 0


def simulate_predictions(inst: np.ndarray, sem: np.ndarray, noise: NoiseConfig,
                         num_classes: int = NUM_CLASSES, boundary_width: int = 1):
    """Probability planes ``(sem_probs, tri_probs)`` derived from ground truth plus noise."""
    rng = make_rng(noise.seed)
    h, w = inst.shape
    tri = encode_three_label(inst, boundary_width)
    interior = (tri == 1).astype(np.float64)
    boundary = (tri == 2).astype(np.float64)
    sem_lab = np.asarray(sem, dtype=np.int64).copy()

    def stamp(mask, y, x, cls, kind_interior=True):
        mh, mw = mask.shape
        if y + mh > h or x + mw > w:
            return
        sl = (slice(y, y + mh), slice(x, x + mw))
        free = mask & (inst[sl] == 0) & (interior[sl] == 0)
        inner = ndimage.binary_erosion(free, iterations=1)
        interior[sl][inner] = 1.0
        boundary[sl][free & ~inner] = 1.0
        sem_lab[sl][free] = cls

    for _ in range(noise.small_blobs):
        m = np.ones((int(rng.integers(2, 3)), int(rng.integers(2, 4))), dtype=bool)
        stamp(m, int(rng.integers(0, h - 4)), int(rng.integers(0, w - 4)),
              int(rng.integers(1, num_classes)))
    for _ in range(noise.concave_blobs):
        m = _crescent(float(rng.uniform(7, 10)), float(rng.uniform(0, 2 * math.pi)))
        stamp(m, int(rng.integers(0, max(1, h - m.shape[0]))),
              int(rng.integers(0, max(1, w - m.shape[1]))), int(rng.integers(1, num_classes)))

    sig = noise.blur
    p_int = ndimage.gaussian_filter(interior, sig) if sig > 0 else interior
    p_bnd = ndimage.gaussian_filter(boundary, sig) if sig > 0 else boundary
    p_int = np.clip(p_int + noise.pixel_noise * rng.standard_normal((h, w)), 0.0, 1.0)
    p_bnd = np.clip(p_bnd + noise.pixel_noise * rng.standard_normal((h, w)), 0.0, 1.0)
    total = p_int + p_bnd
    over = total > 0.999
    p_int[over] *= 0.999 / total[over]
    p_bnd[over] *= 0.999 / total[over]
    tri_probs = np.stack([1.0 - p_int - p_bnd, p_int, p_bnd], axis=-1)

    conf = noise.class_confidence
    sem_probs = np.full((h, w, num_classes), (1.0 - conf) / (num_classes - 1))
    np.put_along_axis(sem_probs, sem_lab[..., None], conf, axis=-1)
    return sem_probs.astype(np.float32), tri_probs.astype(np.float32)


def _crescent(radius: float, angle: float) -> np.ndarray:
    r = int(math.ceil(radius)) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    outer = yy ** 2 + xx ** 2 <= radius ** 2
    oy, ox = 0.55 * radius * math.sin(angle), 0.55 * radius * math.cos(angle)
    inner = (yy - oy) ** 2 + (xx - ox) ** 2 <= (0.8 * radius) ** 2
    m = outer & ~inner
    cc = imagecore.connected_components(m, connectivity=8)
    if cc.max() > 1:
        sizes = np.bincount(cc.ravel())
        sizes[0] = 0
        m = cc == int(np.argmax(sizes))
    ys, xs = np.nonzero(m)
    return m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
