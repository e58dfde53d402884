"""From averaged probability planes to classified nucleus instances.

Stages, in order:

1. seeded watershed on the interior probability, with seed and foreground
   thresholds looked up per pixel from the most likely nucleus class;
2. optional split of every instance into its 8-connected components;
3. class assignment by the largest summed softmax score;
4. per-instance hole filling, then per-class area and solidity filters.

Per-class parameters are arrays indexed by class (index 0 = background is
unused but kept so that ``cfg.seed[c]`` reads naturally).
"""
from __future__ import annotations

import heapq
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import imagecore
from .metrics import NUM_CLASSES, evaluate

_NEIGH8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def _per_class(value, num_classes):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(num_classes, float(arr))
    if arr.shape != (num_classes,):
        raise ValueError(f"per-class parameter needs {num_classes} entries, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class WatershedConfig:
    seed: tuple
    fg: tuple
    min_seed_area: int = 2
    keep_unseeded: bool = True      # foreground pieces no seed reaches become instances

    def __post_init__(self):
        if len(self.seed) != len(self.fg):
            raise ValueError("seed and fg thresholds differ in length")
        for c, (s, f) in enumerate(zip(self.seed, self.fg)):
            if not (0 < f < 1 and 0 < s < 1):
                raise ValueError(f"class {c}: thresholds must lie in (0, 1)")
            if s < f:
                raise ValueError(f"class {c}: seed threshold {s} below fg threshold {f}")

    @classmethod
    def uniform(cls, seed=0.6, fg=0.5, num_classes=NUM_CLASSES, min_seed_area=2,
                keep_unseeded=True):
        return cls(tuple(_per_class(seed, num_classes)), tuple(_per_class(fg, num_classes)),
                   min_seed_area, keep_unseeded)


@dataclass(frozen=True)
class FilterConfig:
    min_area: tuple
    max_area: tuple
    min_solidity: tuple

    def __post_init__(self):
        for c, (lo, hi) in enumerate(zip(self.min_area, self.max_area)):
            if not lo < hi:
                raise ValueError(f"class {c}: min_area {lo} must be below max_area {hi}")

    @classmethod
    def uniform(cls, min_area=10, max_area=1000, min_solidity=0.8, num_classes=NUM_CLASSES):
        return cls(tuple(_per_class(min_area, num_classes)),
                   tuple(_per_class(max_area, num_classes)),
                   tuple(_per_class(min_solidity, num_classes)))


@dataclass(frozen=True)
class PostprocessConfig:
    watershed: WatershedConfig = field(default_factory=WatershedConfig.uniform)
    filters: FilterConfig = field(default_factory=FilterConfig.uniform)
    split_cc: bool = True
    size_filter: bool = True
    solidity_filter: bool = True
    fill_holes: bool = True


# --------------------------------------------------------------------------
# watershed
# --------------------------------------------------------------------------

def threshold_class_map(sem_probs: np.ndarray) -> np.ndarray:
    """Most likely nucleus class per pixel (background excluded)."""
    return (np.argmax(np.asarray(sem_probs)[..., 1:], axis=-1) + 1).astype(np.int64)


def watershed_instances(p_interior: np.ndarray, p_boundary: np.ndarray, class_map: np.ndarray,
                        cfg: WatershedConfig) -> np.ndarray:
    """Seeded watershed on elevation ``-p_interior`` restricted to the foreground.

    Seeds are 8-connected components of ``p_interior >= seed[class]`` with
    at least ``min_seed_area`` pixels; the foreground is
    ``p_interior + p_boundary >= fg[class]``. Flooding follows a priority
    queue keyed by (path maximum elevation, insertion order), so each pixel
    goes to the seed reachable along the lowest-maximum path.

    Thin nuclei can be all boundary and thus have no seed. With
    ``keep_unseeded`` each 8-connected piece of foreground that no seed
    reaches becomes an instance of its own; otherwise it stays background.
    """
    p_int = np.asarray(p_interior, dtype=np.float64)
    p_bnd = np.asarray(p_boundary, dtype=np.float64)
    cls = np.asarray(class_map)
    seed_thr = np.asarray(cfg.seed)[cls]
    fg_thr = np.asarray(cfg.fg)[cls]
    fg = (p_int + p_bnd) >= fg_thr
    seeds = imagecore.connected_components((p_int >= seed_thr) & fg, connectivity=8)
    if cfg.min_seed_area > 1 and seeds.max() > 0:
        sizes = np.bincount(seeds.ravel())
        small = sizes < cfg.min_seed_area
        small[0] = False
        seeds[small[seeds]] = 0
        seeds = _relabel_raster(seeds)
    inst = _flood(-p_int, seeds, fg)
    if cfg.keep_unseeded:
        rest = imagecore.connected_components(fg & (inst == 0), connectivity=8)
        if rest.max() > 0:
            inst = _relabel_raster(np.where(rest > 0, rest + inst.max(), inst))
    return inst


def _flood(elevation: np.ndarray, seeds: np.ndarray, fg: np.ndarray) -> np.ndarray:
    h, w = elevation.shape
    elev = elevation.tolist()
    mask = fg.tolist()
    heap = []
    counter = itertools.count()
    ys, xs = np.nonzero(seeds)
    for y, x in zip(ys.tolist(), xs.tolist()):
        heapq.heappush(heap, (elev[y][x], next(counter), y, x, int(seeds[y, x])))
    # nested lists: per-pixel numpy indexing is far slower in this loop
    done = [[0] * w for _ in range(h)]
    while heap:
        e, _, y, x, label = heapq.heappop(heap)
        if done[y][x]:
            continue
        done[y][x] = label
        for dy, dx in _NEIGH8:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny][nx] and not done[ny][nx]:
                ne = elev[ny][nx]
                heapq.heappush(heap, (ne if ne > e else e, next(counter), ny, nx, label))
    return np.asarray(done, dtype=np.int32).reshape(h, w)


def _relabel_raster(inst: np.ndarray) -> np.ndarray:
    """Relabel to ``1..K`` in raster order of each label's first pixel."""
    flat = inst.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first)]
    lut = np.zeros(int(flat.max()) + 1 if flat.size else 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[inst]


def split_disconnected(inst: np.ndarray) -> np.ndarray:
    """Split every label into its 8-connected pieces; relabel in raster order."""
    inst = np.asarray(inst)
    out = np.zeros(inst.shape, dtype=np.int64)
    nxt = 1
    for label, sl in enumerate(ndimage.find_objects(inst.astype(np.int64)), start=1):
        if sl is None:
            continue
        cc = imagecore.connected_components(inst[sl] == label, connectivity=8)
        m = cc > 0
        out[sl][m] = cc[m] + (nxt - 1)
        nxt += int(cc.max())
    return _relabel_raster(out)


# --------------------------------------------------------------------------
# classification and filters
# --------------------------------------------------------------------------

def assign_classes(inst: np.ndarray, sem_probs: np.ndarray) -> dict[int, int]:
    """Nucleus class with the largest summed probability over each instance.

    Ties go to the lowest class index.
    """
    inst = np.asarray(inst)
    probs = np.asarray(sem_probs, dtype=np.float64)
    fg = inst > 0
    if not fg.any():
        return {}
    ids = inst[fg].astype(np.int64)
    n = int(ids.max()) + 1
    sums = np.stack([np.bincount(ids, weights=probs[..., c][fg], minlength=n)
                     for c in range(1, probs.shape[-1])], axis=1)
    return {int(i): int(np.argmax(sums[i])) + 1 for i in np.unique(ids)}


def filter_instances(inst: np.ndarray, classes: Mapping[int, int], cfg: FilterConfig,
                     fill: bool = True, size_filter: bool = True,
                     solidity_filter: bool = True) -> np.ndarray:
    """Hole-fill each instance, then drop instances failing area or solidity limits."""
    out = np.array(inst, dtype=np.int32, copy=True)
    labels = sorted(int(i) for i in np.unique(out[out > 0]))
    if fill:
        for label in labels:
            sl = _bbox(out == label)
            if sl is None:
                continue
            m = out[sl] == label
            filled = imagecore.fill_holes(m)
            out[sl][filled & ~m] = label
    for label in labels:
        m = out == label
        area = int(m.sum())
        if area == 0:
            continue
        c = classes[label]
        drop = False
        if size_filter and not (cfg.min_area[c] <= area <= cfg.max_area[c]):
            drop = True
        if not drop and solidity_filter and cfg.min_solidity[c] > 0:
            sl = _bbox(m)
            drop = imagecore.solidity(m[sl]) < cfg.min_solidity[c]
        if drop:
            out[m] = 0
    return out


def _bbox(mask: np.ndarray):
    objs = ndimage.find_objects(mask.astype(np.int8))
    return objs[0] if objs else None


def postprocess(sem_probs: np.ndarray, tri_probs: np.ndarray,
                cfg: PostprocessConfig | None = None):
    """Full post-processing of one image.

    Args:
        sem_probs: ``(H, W, C)`` semantic probabilities.
        tri_probs: ``(H, W, 3)`` background / interior / boundary probabilities.

    Returns:
        ``(inst, classes)`` with labels ``1..K`` in raster order.
    """
    cfg = cfg or PostprocessConfig()
    inst = watershed_instances(tri_probs[..., 1], tri_probs[..., 2],
                               threshold_class_map(sem_probs), cfg.watershed)
    return finish_instances(inst, sem_probs, cfg)


def finish_instances(inst: np.ndarray, sem_probs: np.ndarray, cfg: PostprocessConfig):
    """Stages after the watershed (split, classify, fill, filter)."""
    if cfg.split_cc:
        inst = split_disconnected(inst)
    classes = assign_classes(inst, sem_probs)
    inst = filter_instances(inst, classes, cfg.filters, fill=cfg.fill_holes,
                            size_filter=cfg.size_filter, solidity_filter=cfg.solidity_filter)
    final = _relabel_raster(inst)
    remap = {}
    for old, new in zip(inst[inst > 0].tolist(), final[inst > 0].tolist()):
        remap[new] = classes[old]
    return final, remap


def postprocess_many(items: Sequence, cfg: PostprocessConfig | None = None, threads: int = 1):
    """Post-process ``(sem_probs, tri_probs)`` pairs; results keep input order."""
    if threads <= 1:
        return [postprocess(s, t, cfg) for s, t in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda it: postprocess(it[0], it[1], cfg), items))


# --------------------------------------------------------------------------
# threshold search
# --------------------------------------------------------------------------

@dataclass
class ValItem:
    sem_probs: np.ndarray
    tri_probs: np.ndarray
    gt_inst: np.ndarray
    gt_classes: dict


@dataclass
class SearchResult:
    best: PostprocessConfig
    best_score: float
    table: list  # rows: dict(index, description, mPQ+, R2, score)


def _score(report, objective):
    if objective == "mpq":
        return report.mpq
    if objective == "r2":
        if report.r2 is None:
            raise ValueError("R^2 objective needs at least two validation images")
        return report.r2
    raise ValueError(f"unknown objective {objective!r}")


class _Evaluator:
    """Evaluates configs on a validation set, caching watershed output."""

    def __init__(self, val_set: Sequence[ValItem], crop=None):
        if len(val_set) == 0:
            raise ValueError("validation set is empty")
        self.val = list(val_set)
        self.crop = crop
        self.class_maps = [threshold_class_map(v.sem_probs) for v in self.val]
        self._ws_cache: dict = {}

    def __call__(self, cfg: PostprocessConfig):
        key = cfg.watershed
        if key not in self._ws_cache:
            self._ws_cache[key] = [
                watershed_instances(v.tri_probs[..., 1], v.tri_probs[..., 2], cm, key)
                for v, cm in zip(self.val, self.class_maps)
            ]
        preds = [finish_instances(ws, v.sem_probs, cfg)
                 for ws, v in zip(self._ws_cache[key], self.val)]
        gts = [(v.gt_inst, v.gt_classes) for v in self.val]
        return evaluate(preds, gts, crop=self.crop)


def describe(cfg: PostprocessConfig) -> str:
    ws, f = cfg.watershed, cfg.filters

    def fmt(t):
        return "/".join(f"{v:g}" for v in t[1:])

    return (f"seed={fmt(ws.seed)};fg={fmt(ws.fg)};min_area={fmt(f.min_area)};"
            f"max_area={fmt(f.max_area)};min_solidity={fmt(f.min_solidity)}")


def grid_search(candidates: Sequence[PostprocessConfig], val_set: Sequence[ValItem],
                objective: str = "mpq", crop=None, _evaluator=None) -> SearchResult:
    """Evaluate every candidate; the first best one (in list order) wins."""
    if len(candidates) == 0:
        raise ValueError("candidate grid is empty")
    ev = _evaluator or _Evaluator(val_set, crop)
    best_i, best_s, rows = -1, -np.inf, []
    for i, cand in enumerate(candidates):
        rep = ev(cand)
        s = _score(rep, objective)
        rows.append({"index": i, "config": describe(cand), "mPQ+": rep.mpq,
                     "R2": rep.r2 if rep.r2 is not None else float("nan"), "score": s})
        if s > best_s:
            best_i, best_s = i, s
    return SearchResult(candidates[best_i], float(best_s), rows)


_WS_PARAMS = ("seed", "fg")
_FILTER_PARAMS = ("min_area", "max_area", "min_solidity")


def with_param(cfg: PostprocessConfig, name: str, classes: Sequence[int], value) -> PostprocessConfig:
    """Copy of ``cfg`` with parameter ``name`` set to ``value`` for ``classes``."""
    if name in _WS_PARAMS:
        vals = list(getattr(cfg.watershed, name))
        for c in classes:
            vals[c] = float(value)
        return replace(cfg, watershed=replace(cfg.watershed, **{name: tuple(vals)}))
    if name in _FILTER_PARAMS:
        vals = list(getattr(cfg.filters, name))
        for c in classes:
            vals[c] = float(value)
        return replace(cfg, filters=replace(cfg.filters, **{name: tuple(vals)}))
    raise KeyError(f"unknown post-processing parameter {name!r}")


def coordinate_search(base: PostprocessConfig, grid: Mapping[str, Sequence[float]],
                      val_set: Sequence[ValItem], objective: str = "mpq",
                      per_class: bool = True, num_classes: int = NUM_CLASSES, rounds: int = 1,
                      crop=None) -> SearchResult:
    """Tune one parameter (of one class) at a time over its candidate values.

    With ``per_class=False`` each value is applied to all nucleus classes at
    once (class-agnostic thresholds). Candidates that violate config
    invariants (seed < fg, min_area >= max_area) are skipped.
    """
    ev = _Evaluator(val_set, crop)
    best = base
    rep = ev(base)
    best_score = _score(rep, objective)
    table = [{"index": 0, "config": describe(base), "mPQ+": rep.mpq,
              "R2": rep.r2 if rep.r2 is not None else float("nan"), "score": best_score}]
    groups = [[c] for c in range(1, num_classes)] if per_class else [list(range(1, num_classes))]
    for _ in range(rounds):
        for name, values in grid.items():
            for group in groups:
                cands = [best]
                for v in values:
                    try:
                        cands.append(with_param(best, name, group, v))
                    except ValueError:
                        continue
                res = grid_search(cands, val_set, objective, crop, _evaluator=ev)
                for row in res.table:
                    row["index"] = len(table)
                    table.append(row)
                if res.best_score > best_score:
                    best, best_score = res.best, res.best_score
    return SearchResult(best, best_score, table)
