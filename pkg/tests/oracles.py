"""Brute-force reference implementations used only by the tests."""
from __future__ import annotations

from collections import deque

import numpy as np


def bfs_components(mask, connectivity=8):
    """Partition of foreground pixels as a set of frozensets (BFS flood fill)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx]
    else:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    seen = np.zeros_like(mask)
    parts = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                comp = set()
                q = deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    comp.add((cy, cx))
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
                parts.append(frozenset(comp))
    return parts


def partition_of(labels):
    labels = np.asarray(labels)
    out = {}
    for y, x in zip(*np.nonzero(labels)):
        out.setdefault(int(labels[y, x]), set()).add((int(y), int(x)))
    return {frozenset(v) for v in out.values()}


def border_flood_fill(mask):
    """Fill holes: background not 4-reachable from outside the image."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(~mask, 1, constant_values=True)
    h, w = padded.shape
    reach = np.zeros_like(padded)
    q = deque([(0, 0)])
    reach[0, 0] = True
    while q:
        y, x = q.popleft()
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and padded[ny, nx] and not reach[ny, nx]:
                reach[ny, nx] = True
                q.append((ny, nx))
    return ~reach[1:-1, 1:-1]


def hull_area_shapely(mask):
    """Area of the convex hull of the union of pixel squares."""
    from shapely.geometry import box
    from shapely.ops import unary_union

    squares = [box(x, y, x + 1, y + 1) for y, x in zip(*np.nonzero(mask))]
    return unary_union(squares).convex_hull.area


def chebyshev_three_label(inst, width):
    """Per-pixel scan: boundary iff some pixel within Chebyshev ``width`` differs."""
    inst = np.asarray(inst)
    h, w = inst.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            lab = inst[y, x]
            if lab == 0:
                continue
            edge = False
            for yy in range(y - width, y + width + 1):
                for xx in range(x - width, x + width + 1):
                    outside = not (0 <= yy < h and 0 <= xx < w)
                    if outside or inst[yy, xx] != lab:
                        edge = True
            out[y, x] = 2 if edge else 1
    return out


def all_pairs_matching(pred, pred_cls, gt, gt_cls):
    """Exhaustive IoU over every (gt, pred) pair; returns matched (cls, gt, pred, iou)."""
    out = []
    for g in np.unique(gt[gt > 0]):
        gm = gt == g
        for p in np.unique(pred[pred > 0]):
            if gt_cls[int(g)] != pred_cls[int(p)]:
                continue
            pm = pred == p
            inter = np.logical_and(gm, pm).sum()
            union = np.logical_or(gm, pm).sum()
            iou = inter / union
            if iou > 0.5:
                out.append((gt_cls[int(g)], int(g), int(p), float(iou)))
    return sorted(out)


def minimax_costs(elevation, fg, seeds):
    """Bellman-Ford relaxation of bottleneck path cost from each seed label.

    Returns dict label -> (H, W) array of minimax path costs (inf if unreachable).
    """
    elevation = np.asarray(elevation, dtype=np.float64)
    h, w = elevation.shape
    out = {}
    for lab in np.unique(seeds[seeds > 0]):
        cost = np.full((h, w), np.inf)
        cost[seeds == lab] = elevation[seeds == lab]
        changed = True
        while changed:
            changed = False
            for y in range(h):
                for x in range(w):
                    if not fg[y, x]:
                        continue
                    best = cost[y, x]
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = y + dy, x + dx
                            if (dy or dx) and 0 <= ny < h and 0 <= nx < w:
                                c = max(cost[ny, nx], elevation[y, x])
                                if c < best:
                                    best = c
                    if best < cost[y, x]:
                        cost[y, x] = best
                        changed = True
        out[int(lab)] = cost
    return out


def central_difference(f, x, h):
    """Central finite differences of scalar ``f`` at every entry of array ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
