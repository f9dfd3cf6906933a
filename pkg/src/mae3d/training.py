"""Masked point modeling pretraining loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .config import PretrainConfig
from .model import MAE3D, PreparedBatch, collate, prepare_cloud

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "lr", "loss_center", "loss_fine", "loss_total")


class TrainingError(RuntimeError):
    pass


def augment(points, rng=None, scale=(2.0 / 3.0, 1.5), shift=0.2):
    """Per-axis random scale and translation. ``rng=None`` disables augmentation."""
    if rng is None:
        return points
    s = rng.uniform(scale[0], scale[1], size=3)
    t = rng.uniform(-shift, shift, size=3)
    return points * s + t


def _points(cloud):
    return cloud.points if isinstance(cloud, geo.PointCloud) else np.asarray(cloud, dtype=np.float64)


def prepare_batch(clouds, cfg: PretrainConfig, rng, augment_rng=None) -> PreparedBatch:
    """normalize -> augment -> FPS -> KNN patches -> mask, for each cloud."""
    pts, sets = [], []
    for c in clouds:
        p = _points(c)
        if p.shape[0] != cfg.n_points:
            raise ValueError(f"expected {cfg.n_points} points per cloud, got {p.shape[0]}")
        p = augment(geo.normalize_unit_sphere(p), augment_rng)
        start = int(rng.integers(p.shape[0])) if cfg.fps_random_start else 0
        sets.append(prepare_cloud(p, cfg.model, cfg.mask_strategy, cfg.mask_ratio, rng, start))
        pts.append(p)
    return collate(pts, sets)


@dataclass
class StepResult:
    total: float
    center: float
    fine: float


def pretrain_step(model: MAE3D, opt: ad.Adam, batch: PreparedBatch, alpha: float, lr: float) -> StepResult:
    model.train()
    opt.zero_grad()
    total, cd_c, cd_f, _ = model.loss(batch, alpha)
    value = total.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    total.backward()
    opt.step(lr)
    return StepResult(value, cd_c.item(), cd_f.item())


def make_optimizer(model, cfg: PretrainConfig) -> ad.Adam:
    return ad.Adam(model.named_parameters(), lr=cfg.base_lr, weight_decay=cfg.weight_decay)


@dataclass
class PretrainResult:
    model: MAE3D
    optimizer: ad.Adam
    epochs: int
    history: List[dict] = field(default_factory=list)

    def epoch_means(self, key="loss_total"):
        out = {}
        for row in self.history:
            out.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def pretrain(clouds, cfg: PretrainConfig, metrics_path=None, model: Optional[MAE3D] = None,
             progress=None) -> PretrainResult:
    """Train on ``clouds`` for ``cfg.epochs`` epochs; masks are re-drawn every step.

    If ``metrics_path`` is given, one CSV row per optimizer step is written.
    """
    cfg.validate()
    model = MAE3D(cfg.model, seed=cfg.seed) if model is None else model
    opt = make_optimizer(model, cfg)
    n = len(clouds)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    order_rng = np.random.default_rng([cfg.seed, 0])
    aug_rng = np.random.default_rng([cfg.seed, 1]) if cfg.augment else None
    for d in (m for m in model.modules() if isinstance(m, ad.Dropout)):
        d.rng = np.random.default_rng([cfg.seed, 2])

    history = []
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(METRIC_FIELDS)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            mask_rng = np.random.default_rng([cfg.seed, 3, epoch])
            perm = order_rng.permutation(n)
            for b in range(steps_per_epoch):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                batch = prepare_batch([clouds[i] for i in idx], cfg, mask_rng, aug_rng)
                lr = ad.cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr)
                try:
                    res = pretrain_step(model, opt, batch, cfg.alpha, lr)
                except (TrainingError, ad.GradientBlowUp) as exc:
                    raise TrainingError(f"{exc} (epoch {epoch}, batch {b}, lr {lr:.3g})") from exc
                row = {"epoch": epoch, "step": step, "lr": lr, "loss_center": res.center,
                       "loss_fine": res.fine, "loss_total": res.total}
                history.append(row)
                if writer:
                    writer.writerow([epoch, step, repr(lr), repr(res.center), repr(res.fine), repr(res.total)])
                step += 1
            if progress:
                progress(epoch, history[-1])
    finally:
        if fh:
            fh.close()
    return PretrainResult(model, opt, cfg.epochs, history)


def evaluate_reconstruction(model: MAE3D, clouds, cfg: PretrainConfig, seed=0, batch_size=16):
    """Mean center / fine Chamfer distance in eval mode, without augmentation."""
    model.eval()
    rng = np.random.default_rng([seed, 4])
    cds_c, cds_f = [], []
    with ad.no_grad():
        for lo in range(0, len(clouds), batch_size):
            batch = prepare_batch(clouds[lo:lo + batch_size], cfg, rng, None)
            out = model(batch)
            cds_c.extend(ad.chamfer(out.pred_centers, model._t(batch.centers)).data.tolist())
            cds_f.extend(ad.chamfer(out.pred_points, model._t(batch.points)).data.tolist())
    model.train()
    return {"cd_center": float(np.mean(cds_c)), "cd_fine": float(np.mean(cds_f))}
