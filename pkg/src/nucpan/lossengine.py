"""Training losses with analytic gradients.

* semantic head: class-weighted, label-smoothed cross-entropy whose weights
  come from an exponential moving average of class occupancy,
  ``w_c = (1 - X_c) ** rho``;
* instance head: three-label cross-entropy plus an L2 center-vector term.

All losses take channel-last logits ``(..., H, W, C)`` and return
``(loss, grad)`` where ``grad`` has the dtype and shape of the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClassPrior:
    values: np.ndarray
    decay: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")


@dataclass(frozen=True)
class LossWeights:
    weights: np.ndarray
    rho: float = 3.0
    smoothing: float = 0.05
    focal_gamma: float = 0.0


def ema_update(prior: ClassPrior, batch_occupancy: np.ndarray) -> ClassPrior:
    """Return the prior after one EMA step toward ``batch_occupancy``."""
    x = np.asarray(batch_occupancy, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("batch occupancy must lie in [0, 1]")
    g = prior.decay
    return ClassPrior(values=g * np.asarray(prior.values, dtype=np.float64) + (1.0 - g) * x,
                      decay=g)


def class_weights(prior: ClassPrior, rho: float = 3.0, smoothing: float = 0.05,
                  focal_gamma: float = 0.0) -> LossWeights:
    if rho < 0:
        raise ValueError("rho must be >= 0")
    w = (1.0 - np.asarray(prior.values, dtype=np.float64)) ** rho
    return LossWeights(weights=w, rho=rho, smoothing=smoothing, focal_gamma=focal_gamma)


def uniform_weights(num_classes: int, smoothing: float = 0.05) -> LossWeights:
    """Unit class weights (loss weighting disabled)."""
    return LossWeights(weights=np.ones(num_classes), rho=0.0, smoothing=smoothing)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def weighted_smoothed_ce(logits: np.ndarray, target: np.ndarray, weights: LossWeights):
    """Weighted, label-smoothed cross-entropy averaged over pixels.

    With true class ``t`` the smoothed target is
    ``q_c = (1 - eps) * [c == t] + eps / C`` and the pixel loss is
    ``w_t * sum_c -q_c * log p_c``. With ``focal_gamma > 0`` each term is
    additionally scaled by ``(1 - p_c) ** focal_gamma``.

    Returns:
        ``(loss, grad_logits)``.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    dtype = logits.dtype if np.issubdtype(logits.dtype, np.floating) else np.float64
    logits = logits.astype(dtype, copy=False)
    n_cls = logits.shape[-1]
    eps = weights.smoothing
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    target = np.asarray(target).astype(np.int64)
    n_pix = target.size

    q = np.full(logits.shape, eps / n_cls, dtype=dtype)
    np.put_along_axis(q, target[..., None], (1.0 - eps) + eps / n_cls, axis=-1)
    w_pix = np.asarray(weights.weights, dtype=dtype)[target][..., None]

    logp = log_softmax(logits)
    p = np.exp(logp)
    gamma = weights.focal_gamma
    if gamma == 0:
        loss = float(-(w_pix * q * logp).sum(dtype=np.float64) / n_pix)
        grad = w_pix * (p * q.sum(axis=-1, keepdims=True) - q) / n_pix
    else:
        one_minus = np.clip(1.0 - p, 0.0, None)
        mod = one_minus ** gamma
        loss = float(-(w_pix * q * mod * logp).sum(dtype=np.float64) / n_pix)
        # a_c = q_c * p_c * d/dp[(1-p)^g log p]
        a = q * (mod - gamma * one_minus ** (gamma - 1.0) * p * logp)
        grad = w_pix * (p * a.sum(axis=-1, keepdims=True) - a) / n_pix
    return loss, grad.astype(dtype, copy=False)


def instance_loss(tri_logits: np.ndarray, tri_target: np.ndarray, vec_pred: np.ndarray,
                  vec_target: np.ndarray, fg_mask: np.ndarray | None = None,
                  vector_weight: float = 1.0):
    """Three-label CE (mean over pixels) plus L2 vector loss (mean over foreground).

    The vector term sums the squared error of both components and is zero
    when there is no foreground. ``total = ce + vector_weight * l2``; the
    returned ``l2`` is unweighted.

    Returns:
        ``(total, ce, l2, grad_tri_logits, grad_vec)``.
    """
    tri_logits = np.asarray(tri_logits)
    vec_pred = np.asarray(vec_pred)
    if tri_logits.shape[:-1] != vec_pred.shape[:-1] or vec_pred.shape[-1] != 2:
        raise ValueError("tri_logits and vec_pred disagree in shape")
    if fg_mask is None:
        fg_mask = np.asarray(tri_target) > 0
    ce, g_tri = weighted_smoothed_ce(tri_logits, tri_target,
                                     LossWeights(weights=np.ones(3), rho=0.0, smoothing=0.0))
    fg = np.asarray(fg_mask, dtype=bool)[..., None]
    n_fg = int(fg.sum())
    diff = np.where(fg, vec_pred - np.asarray(vec_target, dtype=vec_pred.dtype), 0)
    if n_fg == 0:
        l2 = 0.0
        g_vec = np.zeros_like(vec_pred)
    else:
        l2 = float((diff.astype(np.float64) ** 2).sum() / n_fg)
        g_vec = (2.0 * vector_weight / n_fg) * diff
    return ce + vector_weight * l2, ce, l2, g_tri, g_vec.astype(vec_pred.dtype, copy=False)
