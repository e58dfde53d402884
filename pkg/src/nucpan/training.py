"""Training loop, validation and inference for the toy model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import augment, lossengine, sampler, targets
from .metrics import NUM_CLASSES, evaluate
from .postprocess import PostprocessConfig, ValItem, postprocess
from .toymodel import AdamW, BatchTargets, ToyModel, compute_loss, cosine_lr, init_model, \
    predict_probs

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class Sample:
    image: np.ndarray   # (H, W, 3) float32
    inst: np.ndarray    # (H, W) int
    sem: np.ndarray     # (H, W) int
    name: str = ""

    @property
    def classes(self) -> dict:
        return targets.instance_classes(self.inst, self.sem)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr_base: float = 3e-3
    lr_min: float = 3e-5
    weight_decay: float = 1e-4
    importance_sampling: bool = True
    loss_weighting: bool = True
    ema_decay: float = 0.99
    rho: float = 3.0
    label_smoothing: float = 0.05
    focal_gamma: float = 0.0
    boundary_width: int = 2
    width: int = 32                     # narrower trunks make test-time dropout noisy
    dropout: float = 0.2
    sem_loss_weight: float = 1.0
    inst_loss_weight: float = 1.0
    vector_loss_weight: float = 0.03     # raw-pixel L2 is ~30x the CE terms
    epoch_size: int | None = None       # None: dataset size
    val_every: int = 0                  # 0: only validate at the end
    augment: augment.AugmentConfig = field(default_factory=augment.AugmentConfig.default)
    seed: int = 0
    num_classes: int = NUM_CLASSES


@dataclass
class TrainResult:
    model: ToyModel
    log: list                 # dict rows: step, lr, total, semantic, tri_ce, vector_l2, val_mpq
    best_step: int
    best_val_mpq: float
    final_model: ToyModel | None = None


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]).generate_state(1)[0])


_PURPOSE_EPOCH, _PURPOSE_AUG, _PURPOSE_DROP, _PURPOSE_INIT = 1, 2, 3, 4


def prepare_targets(samples: Sequence[Sample], boundary_width: int):
    return [augment.TrainTargets(
        inst=s.inst, sem=np.asarray(s.sem, dtype=np.int64),
        tri=targets.encode_three_label(s.inst, boundary_width),
        vec=targets.encode_center_vectors(s.inst)) for s in samples]


def train(config: TrainConfig, dataset: Sequence[Sample],
          val_set: Sequence[Sample] = (), post_cfg: PostprocessConfig | None = None) -> TrainResult:
    """Train a fresh toy model.

    Each epoch draws ``epoch_size`` images with replacement (by importance
    sampling or uniformly) and consumes them in batches. With loss weighting
    on, the class prior is updated from each batch's occupancy before the
    weights for that step are formed. When a validation set is given, the
    parameters with the best validation mPQ+ are returned.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    c = config.num_classes
    occ = sampler.occupancy([s.sem for s in dataset], c)
    if config.importance_sampling:
        dist = sampler.sampling_distribution(occ)
    else:
        dist = np.full(len(dataset), 1.0 / len(dataset))
    prior = lossengine.ClassPrior(values=occ.mean(axis=0), decay=config.ema_decay)
    tgts = prepare_targets(dataset, config.boundary_width)

    model = init_model(c, config.width, config.dropout, derive_seed(config.seed, _PURPOSE_INIT))
    opt = AdamW(lr=config.lr_base, weight_decay=config.weight_decay)
    epoch_size = config.epoch_size or len(dataset)
    if epoch_size < config.batch_size:
        raise ValueError(f"epoch size {epoch_size} is smaller than batch size {config.batch_size}")

    rows: list = []
    best = (-math.inf, -1, None)
    step, epoch = 0, 0
    while step < config.steps:
        order = sampler.draw_epoch(dist, epoch_size, derive_seed(config.seed, _PURPOSE_EPOCH, epoch))
        epoch += 1
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            if step >= config.steps:
                break
            idx = order[start:start + config.batch_size]
            imgs, sems, tris, vecs = [], [], [], []
            for j, i in enumerate(idx):
                img, t = augment.augment_train(dataset[i].image, tgts[i], config.augment,
                                               derive_seed(config.seed, _PURPOSE_AUG, step, j))
                imgs.append(img)
                sems.append(t.sem)
                tris.append(t.tri)
                vecs.append(t.vec)
            batch = BatchTargets(sem=np.stack(sems), tri=np.stack(tris), vec=np.stack(vecs))
            if config.loss_weighting:
                batch_occ = np.bincount(batch.sem.ravel(), minlength=c) / batch.sem.size
                prior = lossengine.ema_update(prior, batch_occ)
                weights = lossengine.class_weights(prior, config.rho, config.label_smoothing,
                                                   config.focal_gamma)
            else:
                weights = lossengine.uniform_weights(c, config.label_smoothing)
            try:
                comps, grads = compute_loss(model, np.stack(imgs), batch, weights, "train",
                                            derive_seed(config.seed, _PURPOSE_DROP, step),
                                            config.sem_loss_weight, config.inst_loss_weight,
                                            config.vector_loss_weight)
            except FloatingPointError as exc:
                raise DivergenceError(f"non-finite activations at step {step}; lower lr_base") \
                    from exc
            if not math.isfinite(comps["total"]):
                raise DivergenceError(
                    f"non-finite loss at step {step} (components {comps}); lower lr_base")
            lr = cosine_lr(step, config.steps, config.lr_base, config.lr_min)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(model.params, grads, lr)
            row = {"step": step, "lr": lr, **comps, "val_mpq": float("nan")}
            step += 1
            if val_set and ((config.val_every and step % config.val_every == 0)
                            or step == config.steps):
                score = validate(model, val_set, post_cfg)
                row["val_mpq"] = score
                if score > best[0]:
                    best = (score, step, model.copy())
                log.info("step %d loss %.4f val mPQ+ %.4f", step, comps["total"], score)
            rows.append(row)
    if best[2] is None:
        return TrainResult(model, rows, step, float("nan"))
    return TrainResult(best[2], rows, best[1], best[0], final_model=model)


def predict_dataset(model: ToyModel | Sequence[ToyModel], images: Sequence[np.ndarray],
                    plan: augment.TTAPlan | None = None):
    """Probability planes for each image; ``plan=None`` is a single eval pass."""
    models = list(model) if isinstance(model, Sequence) else [model]
    fns = [lambda x, s, m=m: predict_probs(m, x, s) for m in models]
    out = []
    for img in images:
        if plan is None:
            out.append(predict_probs(models[0], img))
        else:
            out.append(augment.tta_average(fns, img, plan))
    return out


def validate(model, val_set: Sequence[Sample], post_cfg: PostprocessConfig | None = None,
             plan: augment.TTAPlan | None = None) -> float:
    """Validation mPQ+ of the full pipeline."""
    return evaluate_model(model, val_set, post_cfg, plan).mpq


def evaluate_model(model, val_set: Sequence[Sample], post_cfg=None, plan=None):
    probs = predict_dataset(model, [s.image for s in val_set], plan)
    preds = [postprocess(sp, tp, post_cfg) for sp, tp in probs]
    gts = [(s.inst, s.classes) for s in val_set]
    return evaluate(preds, gts)


def val_items(model, val_set: Sequence[Sample], plan=None) -> list[ValItem]:
    """Pair model probabilities with ground truth for threshold search."""
    probs = predict_dataset(model, [s.image for s in val_set], plan)
    return [ValItem(sp, tp, s.inst, s.classes) for (sp, tp), s in zip(probs, val_set)]
