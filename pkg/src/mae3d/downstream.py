"""Downstream harnesses: fine-tuning, frozen linear probe, limited-data probe, few-shot episodes."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Module
from .checkpoint import Checkpoint, CheckpointError, load_extractor
from .config import DownstreamConfig, ModelConfig
from .embedding import PositionalEmbedding, build_extractor

RESULT_FIELDS = ("run", "scheme", "init", "accuracy")


def as_batch(clouds, n_points) -> np.ndarray:
    """Stack clouds as (B, n_points, 3), each normalized to the unit sphere.

    Clouds with more points keep their first ``n_points`` (synthetic and
    sampled clouds are already in random order).
    """
    out = []
    for c in clouds:
        p = c.points if isinstance(c, geo.PointCloud) else np.asarray(c, dtype=np.float64)
        if p.shape[0] < n_points:
            raise ValueError(f"cloud has {p.shape[0]} points, need {n_points}")
        out.append(geo.normalize_unit_sphere(p[:n_points]))
    return np.stack(out)


class Backbone(Module):
    """The patch extractor applied to the whole cloud as a single patch.

    With ``use_pos`` the positional MLP of the cloud centroid is appended to the feature.
    """

    def __init__(self, cfg: ModelConfig, rng, use_pos=False):
        self.extractor = build_extractor(cfg.extractor, cfg.d_feat, rng, cfg.extractor_hidden)
        self.pos_embed = PositionalEmbedding(cfg.d_pos, rng, cfg.pos_hidden) if use_pos else None
        self.out_dim = cfg.d_feat + (cfg.d_pos if use_pos else 0)

    def forward(self, points):
        x = points if isinstance(points, ad.Tensor) else ad.Tensor(np.asarray(points, dtype=self.dtype))
        feat = self.extractor(x)
        if self.pos_embed is None:
            return feat
        centroid = ad.Tensor(x.data.mean(axis=-2))
        return ad.concat([feat, self.pos_embed(centroid)], axis=-1)

    @property
    def dtype(self):
        return self.extractor.linears[0].weight.dtype

    def load_pretrained(self, ck: Checkpoint):
        loaded = load_extractor(self.extractor, ck, "extractor.")
        if self.pos_embed is not None:
            loaded += load_extractor(self.pos_embed, ck, "pos_embed.")
        return loaded


class ClassifierHead(Module):
    """d -> 512 -> 256 -> num_classes with ReLU and dropout between layers."""

    def __init__(self, d_in, num_classes, rng, hidden=(512, 256), dropout_p=0.5, dropout_rng=None):
        dims = (d_in,) + tuple(hidden) + (num_classes,)
        self.layers = [ad.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.drop = ad.Dropout(dropout_p, dropout_rng if dropout_rng is not None else np.random.default_rng(0))
        self.num_classes = num_classes

    def forward(self, x):
        for lin in self.layers[:-1]:
            x = self.drop(ad.relu(lin(x)))
        return self.layers[-1](x)


class Classifier(Module):
    def __init__(self, backbone: Backbone, head: ClassifierHead):
        self.backbone = backbone
        self.head = head

    def forward(self, points):
        return self.head(self.backbone(points))


def build_backbone(model_cfg: ModelConfig, seed, ck: Optional[Checkpoint] = None, use_pos=False) -> Backbone:
    """Randomly initialised backbone, overwritten by ``ck``'s extractor weights when given."""
    bb = Backbone(model_cfg, np.random.default_rng([seed, 9]), use_pos)
    if ck is not None:
        bb.load_pretrained(ck)
    return bb


def build_classifier(model_cfg: ModelConfig, num_classes, cfg: DownstreamConfig,
                     ck: Optional[Checkpoint] = None) -> Classifier:
    bb = build_backbone(model_cfg, cfg.seed, ck, cfg.transfer_pos_embed)
    # the head draws from its own stream so pretrained and scratch runs share its init
    head = ClassifierHead(bb.out_dim, num_classes, np.random.default_rng([cfg.seed, 8]),
                          dropout_p=cfg.head_dropout, dropout_rng=np.random.default_rng([cfg.seed, 6]))
    return Classifier(bb, head)


def _check_labels(train_labels, test_labels, num_classes=None):
    train_labels = np.asarray(train_labels, dtype=np.int64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if train_labels.size == 0:
        raise ValueError("empty training set")
    seen = int(train_labels.max()) + 1
    if num_classes is None:
        num_classes = seen
    if seen > num_classes or (test_labels.size and int(test_labels.max()) >= num_classes):
        raise ValueError(f"class count mismatch: head has {num_classes} classes, "
                         f"labels reach {max(seen, int(test_labels.max(initial=0)) + 1)}")
    if min(train_labels.min(), test_labels.min(initial=0)) < 0:
        raise ValueError("labels must be non-negative")
    return train_labels, test_labels, num_classes


def predict(model: Module, x: np.ndarray, batch_size=64) -> np.ndarray:
    model.eval()
    preds = []
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            preds.append(np.argmax(model(x[lo:lo + batch_size]).data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels))) if len(labels) else 0.0


@dataclass
class FinetuneResult:
    accuracies: List[float]  # test accuracy after each epoch
    losses: List[float]
    model: Classifier = field(repr=False, default=None)

    @property
    def best(self) -> float:
        return max(self.accuracies)

    def epochs_to(self, target: float) -> Optional[int]:
        """First (1-based) epoch whose test accuracy reaches ``target``, or None."""
        for i, a in enumerate(self.accuracies):
            if a >= target:
                return i + 1
        return None


def finetune_run(train_x, train_y, test_x, test_y, model_cfg: ModelConfig, cfg: DownstreamConfig,
                 ck: Optional[Checkpoint] = None, num_classes=None) -> FinetuneResult:
    """Train backbone + head end to end with cross-entropy; test accuracy is recorded per epoch."""
    train_y, test_y, num_classes = _check_labels(train_y, test_y, num_classes)
    model = build_classifier(model_cfg, num_classes, cfg, ck)
    opt = ad.Adam(model.named_parameters(), lr=cfg.finetune_lr, weight_decay=cfg.finetune_weight_decay)
    order = np.random.default_rng([cfg.seed, 5])
    n = len(train_x)
    bs = cfg.finetune_batch_size
    steps = math.ceil(n / bs)
    total = cfg.finetune_epochs * steps
    accs, losses, step = [], [], 0
    for _ in range(cfg.finetune_epochs):
        model.train()
        perm = order.permutation(n)
        ep_loss = []
        for b in range(steps):
            idx = perm[b * bs:(b + 1) * bs]
            opt.zero_grad()
            loss = ad.cross_entropy(model(train_x[idx]), train_y[idx])
            loss.backward()
            opt.step(ad.cosine_lr(step, total, cfg.finetune_lr))
            ep_loss.append(loss.item())
            step += 1
        losses.append(float(np.mean(ep_loss)))
        accs.append(accuracy(predict(model, test_x), test_y))
    return FinetuneResult(accs, losses, model)


def extract_features(backbone: Backbone, x: np.ndarray, batch_size=64) -> np.ndarray:
    backbone.eval()
    out = []
    with ad.no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(backbone(x[lo:lo + batch_size]).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, backbone.out_dim))


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    probe: ad.Linear = field(repr=False, default=None)


def train_probe(train_f, train_y, test_f, test_y, num_classes, cfg: DownstreamConfig,
                standardize=True) -> ProbeResult:
    """Fit a single affine layer on cached features (softmax cross-entropy, Adam)."""
    if standardize:
        mu = train_f.mean(axis=0)
        sd = train_f.std(axis=0) + 1e-6
        train_f, test_f = (train_f - mu) / sd, (test_f - mu) / sd
    probe = ad.Linear(train_f.shape[1], num_classes, np.random.default_rng([cfg.seed, 10]))
    opt = ad.Adam(probe.named_parameters(), lr=cfg.probe_lr)
    order = np.random.default_rng([cfg.seed, 11])
    tf = train_f.astype(np.float32)
    n = len(tf)
    for _ in range(cfg.probe_epochs):
        perm = order.permutation(n)
        for lo in range(0, n, cfg.probe_batch_size):
            idx = perm[lo:lo + cfg.probe_batch_size]
            opt.zero_grad()
            ad.cross_entropy(probe(ad.Tensor(tf[idx])), train_y[idx]).backward()
            opt.step()
    with ad.no_grad():
        tr = accuracy(np.argmax(probe(ad.Tensor(tf)).data, axis=1), train_y)
        te = accuracy(np.argmax(probe(ad.Tensor(test_f.astype(np.float32))).data, axis=1), test_y)
    return ProbeResult(te, tr, probe)


def linear_probe_run(train_x, train_y, test_x, test_y, backbone: Backbone, cfg: DownstreamConfig,
                     num_classes=None, standardize=True) -> ProbeResult:
    """Frozen-feature linear probe. The backbone is asserted unchanged afterwards."""
    train_y, test_y, num_classes = _check_labels(train_y, test_y, num_classes)
    before = backbone.state_dict()
    res = train_probe(extract_features(backbone, train_x), train_y, extract_features(backbone, test_x),
                      test_y, num_classes, cfg, standardize)
    after = backbone.state_dict()
    for name, arr in before.items():
        if not np.array_equal(arr, after[name]):
            raise AssertionError(f"frozen parameter {name!r} changed during probing")
    for name, p in backbone.named_parameters():
        if p.grad is not None and np.any(p.grad):
            raise AssertionError(f"frozen parameter {name!r} received a gradient")
    return res


def stratified_subset(labels, fraction, rng) -> np.ndarray:
    """Indices of a per-class ``fraction`` of ``labels`` (at least one sample per class)."""
    labels = np.asarray(labels)
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(fraction * len(idx))))
        keep.append(np.sort(rng.choice(idx, size=k, replace=False)))
    return np.sort(np.concatenate(keep))


def limited_data_probe(train_f, train_y, test_f, test_y, cfg: DownstreamConfig,
                       ratios=(0.01, 0.02, 0.05, 0.1, 0.2), repeats=3, num_classes=None):
    """Mean probe accuracy on cached features for each training-data ratio."""
    train_y, test_y, num_classes = _check_labels(train_y, test_y, num_classes)
    out = {}
    for r in ratios:
        accs = []
        for rep in range(repeats):
            idx = stratified_subset(train_y, r, np.random.default_rng([cfg.seed, 12, rep]))
            accs.append(train_probe(train_f[idx], train_y[idx], test_f, test_y, num_classes, cfg).accuracy)
        out[r] = float(np.mean(accs))
    return out


@dataclass
class FewShotEpisode:
    classes: np.ndarray  # (K,) dataset class ids
    train_idx: np.ndarray  # (K*N,)
    test_idx: np.ndarray  # (K*n_test,)
    seed: int

    def labels(self, all_labels):
        remap = {int(c): i for i, c in enumerate(self.classes)}
        return (np.array([remap[int(all_labels[i])] for i in self.train_idx], dtype=np.int64),
                np.array([remap[int(all_labels[i])] for i in self.test_idx], dtype=np.int64))


def sample_episode(labels, k_way, n_shot, seed, n_test=20) -> FewShotEpisode:
    """Draw K classes, then N+n_test samples from each; the N lowest-indexed draws form the support set."""
    labels = np.asarray(labels)
    pools = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    eligible = sorted(c for c, idx in pools.items() if len(idx) >= n_shot + n_test)
    if len(eligible) < k_way:
        raise ValueError(f"{k_way}-way {n_shot}-shot needs {k_way} classes with >= {n_shot + n_test} "
                         f"samples; only {len(eligible)} qualify")
    rng = np.random.default_rng([seed, 13])
    classes = np.sort(rng.choice(eligible, size=k_way, replace=False))
    tr, te = [], []
    for c in classes:
        draw = np.sort(rng.choice(pools[int(c)], size=n_shot + n_test, replace=False))
        tr.append(draw[:n_shot])
        te.append(draw[n_shot:])
    return FewShotEpisode(classes, np.concatenate(tr), np.concatenate(te), seed)


@dataclass
class FewShotResult:
    accuracies: List[float]
    episodes: List[FewShotEpisode] = field(repr=False, default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))  # population std

    def __str__(self):
        return f"{100 * self.mean:.1f} +- {100 * self.std:.1f}"


def fewshot_eval(features, labels, k_way, n_shot, cfg: DownstreamConfig, episodes=10, n_test=20,
                 seed=0) -> FewShotResult:
    """K-way N-shot linear probes on precomputed ``features``; episode ``e`` uses seed ``(seed, e)``."""
    accs, eps = [], []
    for e in range(episodes):
        ep = sample_episode(labels, k_way, n_shot, seed * 100003 + e, n_test)
        ytr, yte = ep.labels(labels)
        accs.append(train_probe(features[ep.train_idx], ytr, features[ep.test_idx], yte, k_way, cfg).accuracy)
        eps.append(ep)
    return FewShotResult(accs, eps)


def write_results(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in RESULT_FIELDS})


def summary_table(rows: Sequence[dict]) -> str:
    """Fixed-width text table of results rows."""
    head = f"{'run':<24} {'scheme':<12} {'init':<12} {'accuracy':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{str(r['run']):<24} {r['scheme']:<12} {r['init']:<12} {100 * float(r['accuracy']):8.2f}%")
    return "\n".join(lines)


__all__ = [
    "Backbone", "ClassifierHead", "Classifier", "CheckpointError", "FewShotEpisode", "FewShotResult",
    "FinetuneResult", "ProbeResult", "as_batch", "build_backbone", "build_classifier", "extract_features",
    "fewshot_eval", "finetune_run", "limited_data_probe", "linear_probe_run", "sample_episode",
    "stratified_subset", "summary_table", "train_probe", "write_results",
]
