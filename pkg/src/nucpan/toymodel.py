"""Desk-scale two-head convolutional model with hand-written backpropagation.

Architecture (all 3x3, stride 1, zero "same" padding)::

    image -> conv1 -> ReLU -> dropout -> conv2 -> ReLU -> dropout -> trunk
    trunk -> sem conv  -> C semantic logits
    trunk -> inst conv -> 3 three-label logits + 2 center-vector planes

Dropout is inverted (scaled at train time), so eval mode needs no rescaling.
Arrays are channel-last ``(B, H, W, C)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .lossengine import LossWeights, instance_loss, softmax, weighted_smoothed_ce
from .sampler import make_rng

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "sem_w", "sem_b", "inst_w", "inst_b")
SEM_PARAMS = ("sem_w", "sem_b")
INST_PARAMS = ("inst_w", "inst_b")
MODES = ("train", "eval", "mc_dropout")


@dataclass
class ToyModel:
    params: dict
    num_classes: int
    width: int = 16
    dropout: float = 0.2

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.num_classes,
                        self.width, self.dropout)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def init_model(num_classes: int, width: int = 16, dropout: float = 0.2, seed: int = 0,
               dtype=np.float32) -> ToyModel:
    """He-initialized kernels, zero biases."""
    rng = make_rng(seed)

    def kernel(cin, cout):
        std = math.sqrt(2.0 / (9 * cin))
        return (rng.standard_normal((3, 3, cin, cout)) * std).astype(dtype)

    params = {
        "conv1_w": kernel(3, width),
        "conv1_b": np.zeros(width, dtype),
        "conv2_w": kernel(width, width),
        "conv2_b": np.zeros(width, dtype),
        "sem_w": kernel(width, num_classes) * 0.5,
        "sem_b": np.zeros(num_classes, dtype),
        "inst_w": kernel(width, 5) * 0.5,
        "inst_b": np.zeros(5, dtype),
    }
    return ToyModel(params, num_classes, width, dropout)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def conv_forward(x, w, b):
    bsz, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(bsz, h, wd, -1), cols


def conv_backward(dout, cols, x_shape, w, need_dx=True):
    bsz, h, wd, cin = x_shape
    cout = w.shape[-1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dxp = np.zeros((bsz, h + 2, wd + 2, cin), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd] += (d2 @ w[i, j].T).reshape(bsz, h, wd, cin)
    return dxp[:, 1:-1, 1:-1], dw, db


def _dropout_masks(shape, rate, seed, dtype):
    rng = make_rng(seed)
    keep = 1.0 - rate
    masks = []
    for _ in range(2):
        m = (rng.random(shape, dtype=np.float64) < keep).astype(dtype) / dtype(keep)
        masks.append(m)
    return masks


def forward(model: ToyModel, img: np.ndarray, mode: str = "eval", seed: int | None = None,
            return_cache: bool = False):
    """Run the network.

    Args:
        img: ``(H, W, 3)`` or ``(B, H, W, 3)`` image in [0, 1].
        mode: ``"train"`` or ``"mc_dropout"`` (dropout active, needs ``seed``) or ``"eval"``.

    Returns:
        ``(semantic_logits, tri_logits, vectors)`` (plus a cache when requested),
        with the batch axis only if the input had one.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    p = model.params
    dtype = p["conv1_w"].dtype.type
    x = np.asarray(img)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected image with 3 channels, got shape {np.shape(img)}")
    x = (x.astype(dtype) - dtype(0.5)) * dtype(2.0)
    drop = mode != "eval" and model.dropout > 0
    if drop:
        if seed is None:
            raise ValueError(f"mode {mode!r} needs a dropout seed")
        m1, m2 = _dropout_masks(x.shape[:3] + (model.width,), model.dropout, seed, dtype)
    else:
        m1 = m2 = None

    z1, c1 = conv_forward(x, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0)
    h1 = a1 * m1 if drop else a1
    z2, c2 = conv_forward(h1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0)
    h2 = a2 * m2 if drop else a2
    # both heads read the same trunk features, so they share one im2col
    head_w = np.concatenate([p["sem_w"], p["inst_w"]], axis=-1)
    head_b = np.concatenate([p["sem_b"], p["inst_b"]])
    heads, ch = conv_forward(h2, head_w, head_b)
    c = model.num_classes
    sem, tri, vec = heads[..., :c], heads[..., c:c + 3], heads[..., c + 3:]
    outs = (sem, tri, vec)
    if single:
        outs = tuple(o[0] for o in outs)
    if not return_cache:
        return outs
    cache = dict(x=x, z1=z1, c1=c1, h1=h1, z2=z2, c2=c2, h2=h2, ch=ch, m1=m1, m2=m2,
                 single=single)
    return outs, cache


def backward_from_output_grads(model: ToyModel, cache: dict, g_sem, g_tri, g_vec) -> dict:
    """Backpropagate gradients w.r.t. the three outputs to all parameters."""
    p = model.params
    if cache["single"]:
        g_sem, g_tri, g_vec = g_sem[None], g_tri[None], g_vec[None]
    h2 = cache["h2"]
    grads = {}
    c = model.num_classes
    g_heads = np.concatenate([g_sem, g_tri, g_vec], axis=-1)
    head_w = np.concatenate([p["sem_w"], p["inst_w"]], axis=-1)
    dh2, dw, db = conv_backward(g_heads, cache["ch"], h2.shape, head_w)
    grads["sem_w"], grads["inst_w"] = dw[..., :c], dw[..., c:]
    grads["sem_b"], grads["inst_b"] = db[:c], db[c:]
    if cache["m2"] is not None:
        dh2 = dh2 * cache["m2"]
    dz2 = dh2 * (cache["z2"] > 0)
    dh1, grads["conv2_w"], grads["conv2_b"] = conv_backward(dz2, cache["c2"], cache["h1"].shape,
                                                           p["conv2_w"])
    if cache["m1"] is not None:
        dh1 = dh1 * cache["m1"]
    dz1 = dh1 * (cache["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv_backward(dz1, cache["c1"], cache["x"].shape,
                                                         p["conv1_w"], need_dx=False)
    return {k: grads[k].astype(p[k].dtype, copy=False) for k in PARAM_NAMES}


@dataclass
class BatchTargets:
    sem: np.ndarray     # (B, H, W) class indices
    tri: np.ndarray     # (B, H, W) in {0, 1, 2}
    vec: np.ndarray     # (B, H, W, 2)
    fg: np.ndarray | None = None

    def __post_init__(self):
        if self.fg is None:
            self.fg = np.asarray(self.tri) > 0


def compute_loss(model: ToyModel, img, targets: BatchTargets, weights: LossWeights,
                 mode: str = "train", seed: int | None = None, sem_weight: float = 1.0,
                 inst_weight: float = 1.0, vector_weight: float = 1.0, need_grads: bool = True):
    """Total loss ``sem_weight * semantic + inst_weight * (CE + vector_weight * L2)``.

    Returns:
        ``(components, grads)`` with gradients of the total; ``components`` has
        keys total, semantic, tri_ce, vector_l2 (the last three unweighted).
        ``grads`` is None when ``need_grads`` is False.
    """
    (sem, tri, vec), cache = forward(model, img, mode, seed, return_cache=True)
    l_sem, g_sem = weighted_smoothed_ce(sem, targets.sem, weights)
    l_inst, l_ce, l_l2, g_tri, g_vec = instance_loss(tri, targets.tri, vec, targets.vec,
                                                     targets.fg, vector_weight)
    comps = {
        "total": sem_weight * l_sem + inst_weight * l_inst,
        "semantic": l_sem,
        "tri_ce": l_ce,
        "vector_l2": l_l2,
    }
    if not need_grads:
        return comps, None
    dt = sem.dtype
    grads = backward_from_output_grads(model, cache, g_sem * dt.type(sem_weight),
                                       g_tri * dt.type(inst_weight), g_vec * dt.type(inst_weight))
    return comps, grads


def predict_probs(model: ToyModel, img: np.ndarray, dropout_seed: int | None = None):
    """Softmax planes ``(semantic (H, W, C), three-label (H, W, 3))`` for one image.

    A dropout seed switches on Monte-Carlo dropout.
    """
    mode = "eval" if dropout_seed is None else "mc_dropout"
    sem, tri, _ = forward(model, img, mode, dropout_seed)
    return softmax(sem.astype(np.float64)).astype(np.float32), \
        softmax(tri.astype(np.float64)).astype(np.float32)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

def cosine_lr(step: int, horizon: int, lr_base: float, lr_min: float = 0.0) -> float:
    """``lr_min + (lr_base - lr_min) * (1 + cos(pi * step / horizon)) / 2``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    t = min(max(step, 0), horizon)
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * t / horizon))


@dataclass
class AdamW:
    """Adam with decoupled weight decay."""

    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        """Update ``params`` in place."""
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p *= p.dtype.type(1.0 - lr * self.weight_decay)
            p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
