"""IoU, Boundary IoU, instance mAP and k-fold aggregation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .kernels import boundary_band

MAP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    """|pred & gt| / |pred | gt|; 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def band_radius(shape: tuple[int, int], dilation_fraction: float = 0.02) -> float:
    """Band width in pixels: ``dilation_fraction`` of the image diagonal, at least 1."""
    return max(1.0, dilation_fraction * float(np.hypot(*shape)))


def boundary_iou(pred, gt, dilation_fraction: float = 0.02, radius: float | None = None) -> float:
    """IoU between the inner boundary bands of both masks.

    A mask's band holds its pixels within ``radius`` (Euclidean) of its
    contour.  ``radius`` overrides ``dilation_fraction`` when given.
    """
    pred, gt = _pair(pred, gt)
    r = band_radius(pred.shape, dilation_fraction) if radius is None else float(radius)
    return iou(boundary_band(pred, r), boundary_band(gt, r))


def _mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, N) and (m, N) boolean masks."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-300), 1.0)


def _stack(masks) -> np.ndarray:
    if not masks:
        return np.zeros((0, 0), dtype=bool)
    return np.stack([np.asarray(m, dtype=bool).ravel() for m in masks])


def _average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from the ranked TP flags."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope, right to left
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(sampled.mean())


def instance_map(preds, gts, thresholds: Sequence[float] = MAP_THRESHOLDS, per_class: bool = False):
    """Mean average precision for instance segmentation.

    ``preds`` holds ``(mask, class, score)`` and ``gts`` ``(mask, class)``
    tuples; an optional trailing element names the image (default 0), so a
    whole dataset can be scored in one call.  Per class and IoU threshold,
    predictions are ranked by score (ties by list position) and greedily
    matched to the unmatched ground truth of the same image with the
    highest IoU.  mAP averages over classes present in ``gts`` and then
    over thresholds.  Returns a float, or ``(mAP, {class: AP})`` when
    ``per_class`` is set.
    """
    p_img = [p[3] if len(p) > 3 else 0 for p in preds]
    g_img = [g[2] if len(g) > 2 else 0 for g in gts]
    classes = sorted({int(g[1]) for g in gts})
    per: dict[int, float] = {}
    for c in classes:
        pi = [i for i, p in enumerate(preds) if int(p[1]) == c]
        gi = [i for i, g in enumerate(gts) if int(g[1]) == c]
        scores = np.array([float(preds[i][2]) for i in pi])
        order = [pi[j] for j in np.lexsort((np.arange(len(pi)), -scores))] if pi else []
        images = sorted({g_img[i] for i in gi} | {p_img[i] for i in order}, key=repr)
        ious = {}
        for im in images:
            pp = [i for i in order if p_img[i] == im]
            gg = [i for i in gi if g_img[i] == im]
            pm = _stack([preds[i][0] for i in pp])
            gm = _stack([gts[i][0] for i in gg])
            ious[im] = (pp, gg, _mask_iou_matrix(pm, gm))
        aps = []
        for thr in thresholds:
            used = {im: np.zeros(len(v[1]), dtype=bool) for im, v in ious.items()}
            tp = np.zeros(len(order))
            for rank, i in enumerate(order):
                pp, gg, mat = ious[p_img[i]]
                if not gg:
                    continue
                row = mat[pp.index(i)].copy()
                row[used[p_img[i]]] = -1.0
                j = int(row.argmax())
                if row[j] >= thr - 1e-12:
                    used[p_img[i]][j] = True
                    tp[rank] = 1.0
            aps.append(_average_precision(tp, len(gi)))
        per[c] = float(np.mean(aps))
    value = float(np.mean(list(per.values()))) if per else 0.0
    return (value, per) if per_class else value


# ---------------------------------------------------------------------------
# dataset-level scores


def pooled_class_iou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class IoU over a whole set of label maps (classes 1..num_classes).

    Intersections and unions are summed over all images before dividing;
    a class absent from both prediction and ground truth scores 1.
    """
    pred, gt = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"label shapes differ: pred {pred.shape} vs gt {gt.shape}")
    return np.array([iou(pred == c, gt == c) for c in range(1, num_classes + 1)])


def pooled_class_biou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int,
                      dilation_fraction: float = 0.02) -> np.ndarray:
    """Per-class Boundary IoU with bands computed per image and counts pooled."""
    pred, gt = np.asarray(pred_labels), np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise ValueError(f"label shapes differ: pred {pred.shape} vs gt {gt.shape}")
    r = band_radius(pred.shape[-2:], dilation_fraction)
    out = []
    for c in range(1, num_classes + 1):
        inter = union = 0
        for p, g in zip(pred.reshape(-1, *pred.shape[-2:]), gt.reshape(-1, *gt.shape[-2:])):
            bp, bg = boundary_band(p == c, r), boundary_band(g == c, r)
            inter += np.count_nonzero(bp & bg)
            union += np.count_nonzero(bp | bg)
        out.append(1.0 if union == 0 else inter / union)
    return np.array(out)


@dataclass
class MetricsReport:
    """Scores in [0, 1]; ``folds`` holds per-fold copies when aggregated."""

    per_class_iou: list[float]
    miou: float
    per_class_biou: list[float]
    mbiou: float
    map: float
    per_class_ap: dict[str, float] = field(default_factory=dict)
    folds: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "miou": self.miou,
            "mbiou": self.mbiou,
            "map": self.map,
            "per_class": {"iou": self.per_class_iou, "biou": self.per_class_biou, "ap": self.per_class_ap},
            "folds": self.folds,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, d: dict) -> "MetricsReport":
        known = {"miou", "mbiou", "map", "per_class", "folds"}
        return cls(per_class_iou=list(d["per_class"]["iou"]), miou=d["miou"],
                   per_class_biou=list(d["per_class"]["biou"]), mbiou=d["mbiou"], map=d["map"],
                   per_class_ap=dict(d["per_class"].get("ap", {})), folds=list(d.get("folds", [])),
                   extra={k: v for k, v in d.items() if k not in known})


def evaluate_segmentation(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int,
                          pred_instances=None, gt_instances=None, dilation_fraction: float = 0.02) -> MetricsReport:
    """Semantic IoU/BIoU over label maps plus mAP when instance lists are given."""
    pc_iou = pooled_class_iou(pred_labels, gt_labels, num_classes)
    pc_biou = pooled_class_biou(pred_labels, gt_labels, num_classes, dilation_fraction)
    m_ap, per_ap = 0.0, {}
    if pred_instances is not None and gt_instances is not None:
        m_ap, per = instance_map(pred_instances, gt_instances, per_class=True)
        per_ap = {str(k): v for k, v in per.items()}
    return MetricsReport(pc_iou.tolist(), float(pc_iou.mean()), pc_biou.tolist(), float(pc_biou.mean()),
                         float(m_ap), per_ap)


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSummary:
    mean: float
    std: float
    n: int

    def __str__(self) -> str:
        return format_mean_std(self.mean, self.std)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def summarize(values: Sequence[float]) -> FoldSummary:
    """Mean and sample standard deviation (k - 1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError(f"need at least 2 folds to aggregate, got {v.size}")
    return FoldSummary(float(v.mean()), float(v.std(ddof=1)), int(v.size))


def aggregate_folds(per_fold: Sequence[MetricsReport], scale: float = 100.0) -> dict[str, FoldSummary]:
    """Summaries of miou, mbiou and map across folds, scaled to percentages."""
    if len(per_fold) < 2:
        raise ValueError(f"need at least 2 folds to aggregate, got {len(per_fold)}")
    return {key: summarize([getattr(r, key) * scale for r in per_fold]) for key in ("miou", "mbiou", "map")}


def merge_fold_reports(per_fold: Sequence[MetricsReport]) -> MetricsReport:
    """One report holding per-fold entries and the across-fold means."""
    agg = aggregate_folds(per_fold, scale=1.0)
    pc_iou = np.mean([r.per_class_iou for r in per_fold], axis=0).tolist()
    pc_biou = np.mean([r.per_class_biou for r in per_fold], axis=0).tolist()
    extra = {"summary": {k: {"mean": v.mean * 100, "std": v.std * 100, "text": str(
        FoldSummary(v.mean * 100, v.std * 100, v.n))} for k, v in agg.items()}}
    return MetricsReport(pc_iou, agg["miou"].mean, pc_biou, agg["mbiou"].mean, agg["map"].mean,
                         folds=[asdict(r) for r in per_fold], extra=extra)
