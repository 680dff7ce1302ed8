"""Training loop: embed, forward, match, set loss, backward, AdamW.

Scene features are computed once per dataset. Each epoch visits the training
scenes in a seeded random order, in mini-batches, and then evaluates AP/AR on
the held-out scenes. The per-epoch record feeds the metrics CSV
``epoch,loss,test_error,avg_recall,lr``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import flip_scene
from .detr import ModelConfig, embed_features, init_model, model_forward, scene_features
from .matching import CostWeights, GroundTruth, batch_set_loss, hungarian, match_cost
from .metrics import Detections, coco_summary, detections_from_output, evaluate_ap
from .optim import AdamWState, Schedule, adamw_step, clip_grad_norm, lr_at
from . import tensor as T
from .tensor import GradTape, NumericError, Tensor

METRICS_HEADER = ("epoch", "loss", "test_error", "avg_recall", "lr")

#: (horizontal, vertical) mirror flags of the augmentation variants
FLIPS = ((False, False), (True, False), (False, True), (True, True))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 4
    clip_max_norm: float = 0.1
    drop_factor: float = 0.1
    drop_epoch_fraction: float = 2.0 / 3.0
    cost: CostWeights = field(default_factory=CostWeights)
    aux_loss: bool = False
    flip_augment: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be finite and nonnegative, got {self.lr}")
        if self.weight_decay < 0 or self.clip_max_norm < 0:
            raise ValueError("weight_decay and clip_max_norm must be nonnegative")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.lr, self.epochs, self.drop_factor, self.drop_epoch_fraction)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    test_error: float
    avg_recall: float
    lr: float


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch
        self.detail = detail


@dataclass
class TrainResult:
    metrics: list[EpochMetrics]
    params: dict


def dataset_features(scenes: Sequence, cfg: ModelConfig) -> np.ndarray:
    """Stacked scene features ``(N, grid_size**2, num_classes + 6)``."""
    if not scenes:
        return np.zeros((0, cfg.n_tokens, cfg.feature_dim))
    return np.stack([scene_features(s, cfg.grid_size, cfg.num_classes) for s in scenes])


def predict(params: dict, cfg: ModelConfig, features: np.ndarray, batch_size: int = 32) -> list[Detections]:
    out = []
    for start in range(0, len(features), batch_size):
        tokens = embed_features(Tensor(features[start:start + batch_size]), params)
        pred = model_forward(tokens, cfg, params)
        for b in range(pred.class_logits.shape[0]):
            out.append(detections_from_output(pred.class_logits.data[b], pred.boxes.data[b]))
    return out


def evaluate(params: dict, cfg: ModelConfig, scenes: Sequence, features: np.ndarray | None = None,
             full: bool = False) -> dict:
    """AP and AR on ``scenes``; ``full=True`` adds the size-stratified columns."""
    if features is None:
        features = dataset_features(scenes, cfg)
    dets = predict(params, cfg, features)
    gts = [GroundTruth.from_scene(s) for s in scenes]
    if full:
        return coco_summary(dets, gts)
    r = evaluate_ap(dets, gts)
    return {"AP": r.ap, "AR": r.ar}


def _check_capacity(cfg: ModelConfig, scenes: Sequence) -> None:
    worst = max((len(s.objects) for s in scenes), default=0)
    if worst > cfg.num_queries:
        raise ValueError(f"a scene has {worst} objects but the model has only {cfg.num_queries} queries")


def train(cfg: ModelConfig, train_scenes: Sequence, eval_scenes: Sequence, tcfg: TrainConfig,
          seed: int = 0, params: dict | None = None,
          on_epoch: Callable[[EpochMetrics], None] | None = None) -> TrainResult:
    if not train_scenes:
        raise ValueError("training set is empty")
    _check_capacity(cfg, train_scenes)
    _check_capacity(cfg, eval_scenes)
    params = init_model(cfg, seed) if params is None else dict(params)
    # variant 0 is the scene as given; 1-3 are its mirror images
    flips = FLIPS if tcfg.flip_augment else FLIPS[:1]
    variants = [[flip_scene(s, h, v) for s in train_scenes] for h, v in flips]
    feats = np.stack([dataset_features(scenes, cfg) for scenes in variants])
    gts = [[GroundTruth.from_scene(s) for s in scenes] for scenes in variants]
    eval_feats = dataset_features(eval_scenes, cfg)
    schedule = tcfg.schedule
    state = AdamWState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    history: list[EpochMetrics] = []
    n = len(train_scenes)
    for epoch in range(tcfg.epochs):
        lr = lr_at(schedule, epoch)
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        variant = rng.integers(len(flips), size=n) if len(flips) > 1 else np.zeros(n, dtype=np.intp)
        scene_losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            batch_gts = [gts[variant[i]][i] for i in idx]
            try:
                with GradTape() as tape:
                    tokens = embed_features(Tensor(feats[variant[idx], idx]), params)
                    aux = [] if tcfg.aux_loss else None
                    pred = model_forward(tokens, cfg, params, intermediate=aux)
                    loss, parts = _matched_loss(pred, batch_gts, tcfg.cost)
                    for extra in aux or ():
                        loss = T.add(loss, _matched_loss(extra, batch_gts, tcfg.cost)[0])
                if not math.isfinite(loss.item()):
                    raise NumericError("non-finite loss", stage="set_loss")
                gmap = tape.backward(loss)
            except NumericError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            grads = {name: gmap[p] for name, p in params.items()}
            if tcfg.clip_max_norm > 0:
                grads, total = clip_grad_norm(grads, tcfg.clip_max_norm)
                if not math.isfinite(total):
                    raise TrainingDiverged(epoch, "non-finite gradient norm")
            params = adamw_step(params, grads, state, lr=lr)
            scene_losses.extend(parts.total.tolist())
        epoch_loss = math.fsum(scene_losses) / n
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, "non-finite epoch loss")
        if eval_scenes:
            ev = evaluate(params, cfg, eval_scenes, eval_feats)
            test_error, recall = 1.0 - ev["AP"], ev["AR"]
        else:
            test_error, recall = float("nan"), float("nan")
        m = EpochMetrics(epoch, epoch_loss, test_error, recall, lr)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return TrainResult(history, params)


def _matched_loss(pred, gts, cost: CostWeights):
    assignments = []
    for b, gt in enumerate(gts):
        single = _Slot(pred.class_logits.data[b], pred.boxes.data[b])
        assignments.append(hungarian(match_cost(single, gt, cost)))
    return batch_set_loss(pred, gts, assignments, cost)


@dataclass
class _Slot:
    class_logits: np.ndarray
    boxes: np.ndarray


def metrics_csv(metrics: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow([m.epoch, repr(m.loss), repr(m.test_error), repr(m.avg_recall), repr(m.lr)])
    return buf.getvalue()


def write_metrics_csv(path, metrics: Sequence[EpochMetrics]) -> None:
    Path(path).write_text(metrics_csv(metrics))


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [EpochMetrics(int(r[0]), *(float(v) for v in r[1:])) for r in reader if r]
