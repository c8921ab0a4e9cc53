"""Training, evaluation, checkpoints and run manifests."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .ablation import AblationConfig, build_model
from .autodiff import GradientTape, Tensor
from .data import (CHECKPOINT_MAGIC, SampleRecord, instance_targets, kfold_split, multitask_labels,
                   pooled_labels, read_container, write_container)
from .decoder import ANATOMY, PATHOLOGY
from .losses import (InstanceTargets, LossWeights, branch_loss, hungarian_match, instance_predictions,
                     multitask_class_weights)
from .metrics import MetricsReport, evaluate_segmentation
from .mixing import attended_anatomy_report
from .model import JOINT, PRETRAIN, ModelOutput, SegModel, anatomy_input

MASK_STRIDE = 4


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    """Network inputs and per-head targets for a list of samples."""

    images: np.ndarray  # (N, 3, H, W) float64
    anatomy: np.ndarray  # (N, H, W)
    pathology: np.ndarray
    targets: dict[str, list[InstanceTargets]]
    pooled: dict[str, np.ndarray]  # label maps at mask resolution
    num_anatomy: int
    num_pathology: int

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx: Sequence[int]) -> "PreparedData":
        idx = list(idx)
        return PreparedData(self.images[idx], self.anatomy[idx], self.pathology[idx],
                            {k: [v[i] for i in idx] for k, v in self.targets.items()},
                            {k: v[idx] for k, v in self.pooled.items()}, self.num_anatomy, self.num_pathology)


def _joint_targets(rec: SampleRecord, A: int, mode: str) -> InstanceTargets:
    pasted = multitask_labels(rec.anatomy, rec.pathology, A)
    ana_only = np.where(pasted <= A, pasted, 0)
    ana = instance_targets(ana_only, ana_only, MASK_STRIDE, "semantic")
    path = instance_targets(rec.pathology, rec.pathology_instances, MASK_STRIDE, mode, class_offset=A)
    return InstanceTargets(np.concatenate([ana.masks, path.masks]), np.concatenate([ana.classes, path.classes]))


def prepare(records: Sequence[SampleRecord], num_anatomy: int, num_pathology: int,
            mode: str = "semantic") -> PreparedData:
    A, P = num_anatomy, num_pathology
    targets: dict[str, list[InstanceTargets]] = {ANATOMY: [], PATHOLOGY: [], JOINT: []}
    for rec in records:
        targets[ANATOMY].append(instance_targets(rec.anatomy, rec.anatomy_instances, MASK_STRIDE, "semantic"))
        targets[PATHOLOGY].append(instance_targets(rec.pathology, rec.pathology_instances, MASK_STRIDE, mode))
        targets[JOINT].append(_joint_targets(rec, A, mode))
    images = np.stack([r.image for r in records]).astype(np.float64) if records else np.zeros((0, 3, 1, 1))
    ana = np.stack([r.anatomy for r in records]).astype(np.int64) if records else np.zeros((0, 1, 1), np.int64)
    path = np.stack([r.pathology for r in records]).astype(np.int64) if records else np.zeros((0, 1, 1), np.int64)
    pooled = {
        ANATOMY: np.stack([pooled_labels(a, MASK_STRIDE, A) for a in ana]) if records else ana,
        PATHOLOGY: np.stack([pooled_labels(p, MASK_STRIDE, P) for p in path]) if records else path,
    }
    return PreparedData(images, ana, path, targets, pooled, A, P)


def model_input(model: SegModel, data: PreparedData, idx: Sequence[int]) -> Tensor:
    x = data.images[list(idx)]
    if model.uses_anatomy_input:
        x = anatomy_input(x, data.anatomy[list(idx)], model.num_anatomy)
    return Tensor(x)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with decoupled weight decay; the learning rate is set per step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad.fill(0.0)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def compute_loss(model: SegModel, out: ModelOutput, data: PreparedData, idx: Sequence[int], cfg: AblationConfig,
                 heads: Sequence[str], weights: LossWeights = LossWeights()) -> Tensor:
    """Training loss for the given heads of ``out`` on samples ``idx``."""
    idx = list(idx)
    total = None
    for head in heads:
        preds = out.heads[head].stages
        tg = [data.targets[head][i] for i in idx]
        if head == JOINT:
            cw = multitask_class_weights(model.num_anatomy, model.num_pathology, cfg.gamma)
            term, _ = branch_loss(preds, tg, weights, cw, cfg.deep_supervision)
        else:
            term, _ = branch_loss(preds, tg, weights, None, cfg.deep_supervision)
            if head == PATHOLOGY and ANATOMY in heads:
                term = term * cfg.branch_weight
        total = term if total is None else total + term
    return total


def training_phases(model: SegModel, cfg: AblationConfig) -> list[tuple[tuple[str, ...], int]]:
    """(heads, epochs) per phase; pre-training learns anatomy before pathology."""
    if model.incorporation == PRETRAIN:
        pre = cfg.pretrain_epochs if cfg.pretrain_epochs is not None else max(1, cfg.epochs // 2) if cfg.epochs else 0
        return [((ANATOMY,), pre), ((PATHOLOGY,), cfg.epochs)]
    return [(tuple(model.head_names), cfg.epochs)]


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    phase_of_epoch: list[int] = field(default_factory=list)
    seconds: float = 0.0


def train_model(model: SegModel, data: PreparedData, cfg: AblationConfig, clip: float = 1.0,
                log=None) -> TrainResult:
    """Mini-batch training; one shuffled pass over ``data`` per epoch."""
    shuffle_rng = np.random.default_rng([cfg.seed, cfg.fold, 2])
    result = TrainResult()
    start = time.perf_counter()
    n = len(data)
    for phase, (heads, epochs) in enumerate(training_phases(model, cfg)):
        if epochs == 0 or n == 0:
            continue
        params = model.parameters()
        opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        total_steps = epochs * steps_per_epoch
        step = 0
        for epoch in range(epochs):
            order = shuffle_rng.permutation(n)
            running = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                opt.lr = cosine_lr(cfg.lr, step, total_steps)
                opt.zero_grad()
                try:
                    with GradientTape() as tape:
                        out = model(model_input(model, data, idx), heads)
                        loss = compute_loss(model, out, data, idx, cfg, heads)
                    tape.backward(loss)
                except (ad.NonFiniteError, FloatingPointError) as exc:
                    raise TrainingError(f"non-finite loss at phase {phase} epoch {epoch} step {s}: {exc}") from exc
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at phase {phase} epoch {epoch} step {s}")
                clip_grad_norm(params, clip)
                opt.step()
                running += loss.item() * len(idx)
                step += 1
            result.losses.append(running / n)
            result.phase_of_epoch.append(phase)
            if log is not None:
                log(f"phase {phase} epoch {epoch + 1}/{epochs} loss {running / n:.4f}")
    result.seconds = time.perf_counter() - start
    return result


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Predictions:
    pathology: np.ndarray  # (N, h, w) labels 0..P
    anatomy: np.ndarray | None
    instances: list  # (mask, class, score, image)
    mix_attention: list[list[np.ndarray]]  # per batch, per stage (B, heads, Qp, Qa)
    anatomy_assign: list[np.ndarray]  # per batch (B, Qa)
    pathology_matched: list[np.ndarray]  # per batch (B, Qp)


def predict(model: SegModel, data: PreparedData, batch_size: int = 16) -> Predictions:
    path_maps, ana_maps, inst = [], [], []
    mix, assign, matched = [], [], []
    A = model.num_anatomy
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            idx = list(range(start, min(len(data), start + batch_size)))
            heads = tuple(h for h in model.head_names if not (model.incorporation == PRETRAIN and h == ANATOMY))
            out = model(model_input(model, data, idx), heads)
            path_maps.append(model.pathology_labels(out))
            ana = model.anatomy_labels(out)
            if ana is not None:
                ana_maps.append(ana)
            pred = model.pathology_prediction(out)
            for b, i in enumerate(idx):
                for ip in instance_predictions(pred, b):
                    c = ip.label
                    if model.eval_head == JOINT:
                        if c < A:
                            continue
                        c -= A
                    inst.append((ip.mask, c, ip.score, i))
            trace = out.traces.get(PATHOLOGY)
            if trace is not None and trace.mix_attention and ANATOMY in out.heads:
                mix.append(trace.mix_attention)
                ana_pred = out.heads[ANATOMY].final
                Qa = ana_pred.class_logits.shape[1]
                a = np.full((len(idx), Qa), -1, dtype=np.int64)
                pm = np.zeros((len(idx), pred.class_logits.shape[1]), dtype=bool)
                for b, i in enumerate(idx):
                    ta = data.targets[ANATOMY][i]
                    for q, t in hungarian_match(ana_pred, ta, index=b).pairs:
                        a[b, q] = ta.classes[t]
                    for q, _ in hungarian_match(pred, data.targets[PATHOLOGY][i], index=b).pairs:
                        pm[b, q] = True
                assign.append(a)
                matched.append(pm)
    h_w = data.pooled[PATHOLOGY].shape[1:]
    return Predictions(
        np.concatenate(path_maps) if path_maps else np.zeros((0,) + h_w, np.int64),
        np.concatenate(ana_maps) if ana_maps else None,
        inst, mix, assign, matched)


def gt_instances(data: PreparedData) -> list:
    out = []
    for i, t in enumerate(data.targets[PATHOLOGY]):
        h, w = data.pooled[PATHOLOGY].shape[1:]
        for m, c in zip(t.masks, t.classes):
            out.append((m.reshape(h, w) > 0.5, int(c), i))
    return out


def attended_report(preds: Predictions, k: int = 5):
    """Attended-anatomy ranking pooled over all evaluated batches (1-based anatomy classes)."""
    if not preds.mix_attention:
        return None
    stages = len(preds.mix_attention[0])
    weights = [np.concatenate([batch[s] for batch in preds.mix_attention]) for s in range(stages)]
    assign = np.concatenate(preds.anatomy_assign)
    sel = np.concatenate(preds.pathology_matched)
    if not sel.any():
        sel = np.ones_like(sel)
    report = attended_anatomy_report(weights, assign, k=k, pathology_queries=sel)
    return [{"anatomy_class": e.anatomy_class + 1, "mass": e.mass} for e in report]


def evaluate(model: SegModel, data: PreparedData, batch_size: int = 16) -> tuple[MetricsReport, Predictions]:
    preds = predict(model, data, batch_size)
    report = evaluate_segmentation(preds.pathology, data.pooled[PATHOLOGY], model.num_pathology,
                                   preds.instances, gt_instances(data))
    if preds.anatomy is not None:
        ana_report = evaluate_segmentation(preds.anatomy, data.pooled[ANATOMY], model.num_anatomy)
        report.extra["anatomy_miou"] = ana_report.miou
    att = attended_report(preds)
    if att is not None:
        report.extra["attended_anatomy"] = att
    return report, preds


# ---------------------------------------------------------------------------
# checkpoints and manifests


def save_checkpoint(model: SegModel, path: str | Path, meta: dict | None = None) -> None:
    state = model.state_dict()
    arrays = [(name, state[name]) for name in sorted(state)]
    write_container(path, [(meta or {}, arrays)], CHECKPOINT_MAGIC)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    records = read_container(path, CHECKPOINT_MAGIC)
    if len(records) != 1:
        raise ValueError(f"{path}: checkpoint must hold exactly one record, found {len(records)}")
    return records[0]


@dataclass
class RunResult:
    config: AblationConfig
    report: MetricsReport
    train: TrainResult
    model: SegModel


def run_fold(cfg: AblationConfig, records: Sequence[SampleRecord], num_anatomy: int, num_pathology: int,
             mode: str = "semantic", log=None) -> RunResult:
    """Train on the fold's training part of ``records`` and score its validation part."""
    splits = kfold_split(len(records), cfg.folds, cfg.seed)
    train_idx, val_idx = splits[cfg.fold]
    data = prepare(records, num_anatomy, num_pathology, mode)
    model = build_model(cfg, num_anatomy, num_pathology)
    tr = train_model(model, data.subset(train_idx), cfg, log=log)
    report, _ = evaluate(model, data.subset(val_idx))
    return RunResult(cfg, report, tr, model)


def manifest(cfg: AblationConfig, dataset_hash: str, train: TrainResult, report: MetricsReport,
             extra: dict | None = None) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dataset_sha1": dataset_hash,
        "losses": train.losses,
        "metrics": report.to_json_dict(),
        "wall_clock_seconds": train.seconds,
        **(extra or {}),
    }


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_pgm(path: str | Path, labels: np.ndarray, max_label: int) -> None:
    """Binary PGM (P5) with labels spread over 0..255."""
    img = np.asarray(labels, dtype=np.float64)
    scale = 255.0 / max(1, max_label)
    pix = np.clip(np.rint(img * scale), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pix.tobytes())
