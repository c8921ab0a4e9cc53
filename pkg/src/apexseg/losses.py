"""Dot-product segment heads, bipartite matching and set-prediction losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import linear_assignment


@dataclass
class SegmentPrediction:
    """Batched per-query mask logits (B, Q, H*W) and class logits (B, Q, C+1).

    The last class column is "no object".
    """

    mask_logits: Tensor
    class_logits: Tensor
    hw: tuple[int, int]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[-1] - 1

    def masks(self) -> np.ndarray:
        B, Q, _ = self.mask_logits.shape
        return self.mask_logits.data.reshape(B, Q, *self.hw)

    def sample(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        return self.mask_logits.data[b], self.class_logits.data[b]


@dataclass
class InstanceTargets:
    """Target segments of one image at mask resolution: (K, H*W) binary masks, (K,) classes."""

    masks: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.float64)
        if masks.size == 0:
            self.masks = np.zeros((0, int(np.prod(masks.shape[1:])) if masks.ndim > 1 else 0))
        else:
            self.masks = masks.reshape(len(self.classes), -1)
        self.classes = np.asarray(self.classes, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.classes)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int]
    total_cost: float

    @property
    def query_index(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def target_index(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1


def predict_segments(J_fine: Tensor, q: Tensor, classifier, hw: tuple[int, int]) -> SegmentPrediction:
    """``mask_logits[b, k, p] = sum_c J_0[b, c, p] * q[b, k, c]``; classes from a linear head."""
    return SegmentPrediction(q @ J_fine, classifier(q), hw)


# ---------------------------------------------------------------------------
# matching


def _soft_dice_loss(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Pairwise 1 - (2 p.t + 1) / (|p|^2 + |t|^2 + 1) for (Q, N) x (K, N)."""
    num = 2.0 * p @ t.T + 1.0
    den = (p * p).sum(1)[:, None] + (t * t).sum(1)[None, :] + 1.0
    return 1.0 - num / den


def match_cost_matrix(mask_logits: np.ndarray, class_logits: np.ndarray, targets: InstanceTargets,
                      weights: LossWeights = LossWeights()) -> np.ndarray:
    """(Q, K) matching cost between predicted segments and target segments."""
    if len(targets) == 0:
        return np.zeros((mask_logits.shape[0], 0))
    prob = special.softmax(class_logits, axis=-1)
    t = targets.masks
    n = mask_logits.shape[1]
    sp = np.logaddexp(0.0, mask_logits).sum(1)[:, None]
    bce = (sp - mask_logits @ t.T) / n
    dice = _soft_dice_loss(special.expit(mask_logits), t)
    return weights.cls * -prob[:, targets.classes] + weights.bce * bce + weights.dice * dice


def _optimum(cost: np.ndarray) -> float:
    r, c = linear_assignment(cost)
    return float(cost[r, c].sum())


def _is_tie(a: float, b: float, scale: float) -> bool:
    return abs(a - b) <= 1e-9 * max(1.0, scale)


def assign_min_cost(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective (query, target) pairs for a (Q, K) cost matrix.

    Every target is matched when Q >= K (every query when Q < K).  Among
    co-optimal assignments the one whose pair list, sorted by query, is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    Q, K = cost.shape
    if Q == 0 or K == 0:
        return []
    r, c = linear_assignment(cost)
    best = float(cost[r, c].sum())
    scale = float(np.abs(cost).sum())
    pairs = sorted(zip(r.tolist(), c.tolist()))
    # the optimum is unique unless banning one of its pairs keeps the cost
    big = 2.0 * scale + 1.0
    unique = True
    for qi, ti in pairs:
        banned = cost.copy()
        banned[qi, ti] = big
        if _is_tie(_optimum(banned), best, scale):
            unique = False
            break
    if unique:
        return pairs
    return _lexicographic_optimum(cost, best, scale)


def _lexicographic_optimum(cost: np.ndarray, best: float, scale: float) -> list[tuple[int, int]]:
    Q, K = cost.shape
    size = min(Q, K)
    fixed: list[tuple[int, int]] = []
    fixed_cost = 0.0
    skipped: set[int] = set()
    for q in range(Q):
        if len(fixed) == size:
            break
        used_t = {t for _, t in fixed}
        chosen = None
        for t in range(K):
            if t in used_t:
                continue
            rows = [i for i in range(q + 1, Q) if i not in skipped]
            cols = [j for j in range(K) if j not in used_t and j != t]
            need = size - len(fixed) - 1
            if min(len(rows), len(cols)) < need:
                continue
            rest = _optimum(cost[np.ix_(rows, cols)]) if need > 0 else 0.0
            if _is_tie(fixed_cost + cost[q, t] + rest, best, scale):
                chosen = t
                break
        if chosen is None:
            skipped.add(q)
        else:
            fixed.append((q, chosen))
            fixed_cost += cost[q, chosen]
    return fixed


def hungarian_match(pred: SegmentPrediction, targets: InstanceTargets, weights: LossWeights = LossWeights(),
                    index: int = 0) -> MatchResult:
    """Match the queries of sample ``index`` in ``pred`` to ``targets``."""
    mask_logits, class_logits = pred.sample(index)
    cost = match_cost_matrix(mask_logits, class_logits, targets, weights)
    pairs = assign_min_cost(cost)
    matched = {q for q, _ in pairs}
    total = float(np.sum([cost[q, t] for q, t in pairs])) if pairs else 0.0
    return MatchResult(pairs, [q for q in range(cost.shape[0]) if q not in matched], total)


# ---------------------------------------------------------------------------
# losses


def _check(name: str, value: Tensor) -> Tensor:
    if not np.isfinite(value.data).all():
        raise FloatingPointError(f"{name}: non-finite loss term")
    return value


def segmentation_loss(pred: SegmentPrediction, matches: Sequence[MatchResult], targets: Sequence[InstanceTargets],
                      weights: LossWeights = LossWeights(), class_weights: np.ndarray | None = None) -> Tensor:
    """Weighted cross-entropy plus binary mask losses for one branch.

    Class term: ``sum_q w_q * CE_q / (B * Q)`` where ``w_q`` is the target
    class weight for matched queries and ``no_object`` for the rest.  Mask
    term: per matched pair ``bce * BCE + dice * DiceLoss`` (scaled by the
    target class weight), summed and divided by the number of targets in the
    batch (at least 1).
    """
    B, Q, C1 = pred.class_logits.shape
    C = C1 - 1
    cw = np.ones(C) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if cw.shape != (C,):
        raise ValueError(f"class_weights must have shape ({C},), got {cw.shape}")
    tgt_cls = np.full((B, Q), C, dtype=np.int64)
    w = np.full((B, Q), weights.no_object)
    mb, mq, mt_masks, mt_w = [], [], [], []
    n_targets = 0
    for b, (m, t) in enumerate(zip(matches, targets)):
        n_targets += len(t)
        if not m.pairs:
            continue
        qi, ti = m.query_index, m.target_index
        cls = t.classes[ti]
        tgt_cls[b, qi] = cls
        w[b, qi] = cw[cls]
        mb.append(np.full(len(qi), b))
        mq.append(qi)
        mt_masks.append(t.masks[ti])
        mt_w.append(cw[cls])
    logp = ad.log_softmax(pred.class_logits, axis=-1)
    bi, qi = np.meshgrid(np.arange(B), np.arange(Q), indexing="ij")
    picked = logp[bi.reshape(-1), qi.reshape(-1), tgt_cls.reshape(-1)]
    loss = _check("class", ad.sum(picked * (-w.reshape(-1))) * (weights.cls / (B * Q)))
    if mb:
        bm, qm = np.concatenate(mb), np.concatenate(mq)
        t = np.concatenate(mt_masks)
        pw = np.concatenate(mt_w)
        z = pred.mask_logits[bm, qm]
        n = z.shape[1]
        bce = ad.sum(ad.softplus(z) - z * t, axis=1) * (1.0 / n)
        p = ad.sigmoid(z)
        num = ad.sum(p * t, axis=1) * 2.0 + 1.0
        den = ad.sum(p * p, axis=1) + (t * t).sum(1) + 1.0
        dice = 1.0 - num / den
        per_pair = bce * weights.bce + dice * weights.dice
        mask_term = ad.sum(per_pair * pw) * (1.0 / max(1, n_targets))
        loss = loss + _check("mask", mask_term)
    return loss


def branch_loss(preds: Sequence[SegmentPrediction], targets: Sequence[InstanceTargets],
                weights: LossWeights = LossWeights(), class_weights: np.ndarray | None = None,
                deep_supervision: bool = True) -> tuple[Tensor, list[MatchResult]]:
    """Sum of :func:`segmentation_loss` over decoder stages (only the last without deep supervision).

    Returns the loss and the matches of the final stage.
    """
    stages = preds if deep_supervision else preds[-1:]
    total = None
    last: list[MatchResult] = []
    for pred in stages:
        matches = [hungarian_match(pred, t, weights, b) for b, t in enumerate(targets)]
        term = segmentation_loss(pred, matches, targets, weights, class_weights)
        total = term if total is None else total + term
        last = matches
    return total, last


def joint_loss(loss_ana: Tensor | None, loss_path: Tensor, branch_weight: float = 1.0) -> Tensor:
    """``loss_ana + branch_weight * loss_path``."""
    out = loss_path * branch_weight
    return out if loss_ana is None else loss_ana + out


def multitask_class_weights(num_anatomy: int, num_pathology: int, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return np.concatenate([np.ones(num_anatomy), np.full(num_pathology, float(gamma))])


def multitask_loss(preds: SegmentPrediction | Sequence[SegmentPrediction], targets: Sequence[InstanceTargets],
                   gamma: float, num_anatomy: int, num_pathology: int,
                   weights: LossWeights = LossWeights(), deep_supervision: bool = True) -> Tensor:
    """Single-head loss over anatomy classes 0..A-1 and pathology classes A..A+P-1.

    Pathology classes carry weight ``gamma``, anatomy classes weight 1.
    """
    cw = multitask_class_weights(num_anatomy, num_pathology, gamma)
    if isinstance(preds, SegmentPrediction):
        preds = [preds]
    loss, _ = branch_loss(preds, targets, weights, cw, deep_supervision)
    return loss


# ---------------------------------------------------------------------------
# inference


def semantic_map(pred: SegmentPrediction, threshold: float = 0.5, mask_threshold: float = 0.5) -> np.ndarray:
    """Per-pixel labels (B, H, W): 0 background, c+1 for class c.

    Queries whose most likely label is a real class with probability at
    least ``threshold`` are kept.  Each pixel goes to the kept query with
    the highest ``p_q(c_q) * sigmoid(mask_q)``, provided that query's mask
    probability there reaches ``mask_threshold``; other pixels are
    background.
    """
    prob = special.softmax(pred.class_logits.data, axis=-1)
    sig = special.expit(pred.mask_logits.data)
    cls = prob.argmax(axis=-1)
    conf = np.take_along_axis(prob, cls[..., None], axis=-1)[..., 0]
    keep = (cls < prob.shape[-1] - 1) & (conf >= threshold)
    score = np.where(keep[..., None], conf[..., None] * sig, -1.0)
    best = score.argmax(axis=1)  # (B, N)
    bsel = np.arange(score.shape[0])[:, None]
    pix_sig = sig[bsel, best, np.arange(score.shape[2])[None, :]]
    ok = (score.max(axis=1) >= 0.0) & (pix_sig >= mask_threshold)
    labels = np.where(ok, cls[bsel, best] + 1, 0)
    return labels.reshape(labels.shape[0], *pred.hw)


@dataclass
class InstancePrediction:
    mask: np.ndarray
    label: int
    score: float


def instance_predictions(pred: SegmentPrediction, index: int = 0, min_score: float = 0.0) -> list[InstancePrediction]:
    """Per-query instances: argmax non-void class, binary mask at sigmoid > 0.5.

    Score is class probability times the mean mask probability inside the mask.
    """
    mask_logits, class_logits = pred.sample(index)
    prob = special.softmax(class_logits, axis=-1)[:, :-1]
    sig = special.expit(mask_logits)
    out = []
    for q in range(prob.shape[0]):
        c = int(prob[q].argmax())
        m = sig[q] > 0.5
        if not m.any():
            continue
        score = float(prob[q, c] * sig[q][m].mean())
        if score >= min_score:
            out.append(InstancePrediction(m.reshape(pred.hw), c, score))
    return out


@dataclass
class StagePredictions:
    """Deep-supervision predictions for one branch, final stage last."""

    stages: list[SegmentPrediction] = field(default_factory=list)

    @property
    def final(self) -> SegmentPrediction:
        return self.stages[-1]
