"""Panoptic quality (dataset-aggregated PQ+ / mPQ+), count R^2 and cropped counting.

Class conventions: index 0 is background; nucleus classes are ``1..C-1``.
Per-class result arrays have length ``C - 1`` and are indexed by ``class - 1``.

PQ+ here means: TP, FP, FN and the IoU sum of matched pairs are accumulated
over every image of the dataset first, and only then combined into
``sum_iou / (TP + FP/2 + FN/2)`` per class. R^2 is computed per class over
per-image instance counts and averaged over classes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

CLASS_NAMES = ("background", "neutrophil", "epithelial", "lymphocyte", "plasma", "eosinophil",
               "connective")
SHORT_NAMES = ("bg", "neu", "epi", "lym", "pla", "eos", "con")
NUM_CLASSES = len(CLASS_NAMES)


@dataclass
class MatchStats:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    iou_sum: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int = NUM_CLASSES) -> "MatchStats":
        k = num_classes - 1
        return cls(np.zeros(k, np.int64), np.zeros(k, np.int64), np.zeros(k, np.int64),
                   np.zeros(k, np.float64))

    def __add__(self, other: "MatchStats") -> "MatchStats":
        return MatchStats(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.iou_sum + other.iou_sum)


@dataclass(frozen=True)
class Match:
    cls: int
    gt: int
    pred: int
    iou: float


def _areas(inst: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(inst[inst > 0], return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))


def pairwise_intersections(pred: np.ndarray, gt: np.ndarray) -> dict[tuple[int, int], int]:
    """Pixel overlap of every (gt, pred) label pair that overlaps at all."""
    both = (pred > 0) & (gt > 0)
    if not both.any():
        return {}
    g = gt[both].astype(np.int64)
    p = pred[both].astype(np.int64)
    key = g * (int(p.max()) + 1) + p
    uniq, counts = np.unique(key, return_counts=True)
    base = int(p.max()) + 1
    return {(int(k // base), int(k % base)): int(c) for k, c in zip(uniq, counts)}


def match_instances(pred: np.ndarray, pred_classes: Mapping[int, int], gt: np.ndarray,
                    gt_classes: Mapping[int, int], num_classes: int = NUM_CLASSES):
    """Class-wise IoU > 0.5 matching of one image.

    Returns:
        ``(stats, matches)`` where ``matches`` lists the matched pairs.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pa, ga = _areas(pred), _areas(gt)
    matches: list[Match] = []
    matched_p, matched_g = set(), set()
    for (g, p), inter in sorted(pairwise_intersections(pred, gt).items()):
        if gt_classes[g] != pred_classes[p]:
            continue
        iou = inter / (pa[p] + ga[g] - inter)
        if iou > 0.5:
            matches.append(Match(int(gt_classes[g]), g, p, iou))
            matched_p.add(p)
            matched_g.add(g)
    stats = MatchStats.zeros(num_classes)
    for m in matches:
        stats.tp[m.cls - 1] += 1
        stats.iou_sum[m.cls - 1] += m.iou
    for p in pa:
        if p not in matched_p:
            stats.fp[pred_classes[p] - 1] += 1
    for g in ga:
        if g not in matched_g:
            stats.fn[gt_classes[g] - 1] += 1
    return stats, matches


def pq_plus(stats: MatchStats):
    """Per-class PQ+ and their mean (mPQ+).

    A class with a zero denominator (absent from prediction and ground truth
    everywhere) scores 0.
    """
    denom = stats.tp + 0.5 * stats.fp + 0.5 * stats.fn
    pq = np.divide(stats.iou_sum, denom, out=np.zeros_like(stats.iou_sum), where=denom > 0)
    return pq, float(pq.mean())


def dataset_stats(preds: Iterable, gts: Iterable, num_classes: int = NUM_CLASSES) -> MatchStats:
    """Accumulate MatchStats over ``(inst, classes)`` pairs."""
    total = MatchStats.zeros(num_classes)
    for (pi, pc), (gi, gc) in zip(preds, gts):
        total = total + match_instances(pi, pc, gi, gc, num_classes)[0]
    return total


def r_squared(true_counts: np.ndarray, pred_counts: np.ndarray):
    """Per-class coefficient of determination over images, and its class mean.

    A class with zero variance in the true counts scores 1 if all residuals
    are zero and 0 otherwise.
    """
    t = np.asarray(true_counts, dtype=np.float64)
    p = np.asarray(pred_counts, dtype=np.float64)
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError("count tables must both be (images, classes)")
    if t.shape[0] < 2:
        raise ValueError("R^2 needs at least two images")
    ss_res = ((p - t) ** 2).sum(axis=0)
    ss_tot = ((t - t.mean(axis=0)) ** 2).sum(axis=0)
    r2 = np.empty(t.shape[1])
    for k in range(t.shape[1]):
        if ss_tot[k] == 0:
            r2[k] = 1.0 if ss_res[k] == 0 else 0.0
        else:
            r2[k] = 1.0 - ss_res[k] / ss_tot[k]
    return r2, float(r2.mean())


def count_with_crop(inst: np.ndarray, classes: Mapping[int, int], crop: int | None = None,
                    num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Instances per nucleus class with at least one pixel inside the centered crop."""
    inst = np.asarray(inst)
    h, w = inst.shape
    if crop is not None:
        if crop > h or crop > w:
            raise ValueError(f"crop {crop} larger than image {inst.shape}")
        y0, x0 = (h - crop) // 2, (w - crop) // 2
        inst = inst[y0:y0 + crop, x0:x0 + crop]
    counts = np.zeros(num_classes - 1, dtype=np.int64)
    for i in np.unique(inst[inst > 0]):
        counts[classes[int(i)] - 1] += 1
    return counts


@dataclass
class Report:
    pq: np.ndarray
    mpq: float
    r2_per_class: np.ndarray | None
    r2: float | None
    stats: MatchStats

    def as_row(self) -> dict:
        row = {"mPQ+": self.mpq, "R2": self.r2 if self.r2 is not None else float("nan")}
        for k, name in enumerate(SHORT_NAMES[1:len(self.pq) + 1]):
            row[name] = float(self.pq[k])
        return row

    def to_csv(self) -> str:
        row = self.as_row()
        return ",".join(row) + "\n" + ",".join(repr(float(v)) for v in row.values()) + "\n"

    def to_table(self) -> str:
        row = self.as_row()
        head = "".join(f"{k:>8}" for k in row)
        vals = "".join(f"{v:>8.3f}" for v in row.values())
        return head + "\n" + vals + "\n"


def evaluate(preds: Sequence, gts: Sequence, num_classes: int = NUM_CLASSES,
             crop: int | None = None) -> Report:
    """mPQ+/PQ+ over the dataset plus R^2 of per-image counts (if >= 2 images).

    ``preds`` and ``gts`` are sequences of ``(inst, classes)`` pairs.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    stats = dataset_stats(preds, gts, num_classes)
    pq, mpq = pq_plus(stats)
    r2k = r2 = None
    if len(preds) >= 2:
        tc = np.stack([count_with_crop(i, c, crop, num_classes) for i, c in gts])
        pc = np.stack([count_with_crop(i, c, crop, num_classes) for i, c in preds])
        r2k, r2 = r_squared(tc, pc)
    return Report(pq, mpq, r2k, r2, stats)
