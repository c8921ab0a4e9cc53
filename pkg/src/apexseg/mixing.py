"""Anatomy-to-pathology query mixing and the attended-anatomy report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .nn import LayerNorm, Module, MultiHeadAttention

IDENTITY = "identity"
SUM = "sum"
SUM_2WAY = "sum_2way"
MEAN = "mean"
CROSS_ATTENTION = "cross_attention"
CROSS_ATTENTION_PER_LEVEL = "cross_attention_per_level"

KINDS = (IDENTITY, SUM, SUM_2WAY, MEAN, CROSS_ATTENTION, CROSS_ATTENTION_PER_LEVEL)
ATTENTION_KINDS = (CROSS_ATTENTION, CROSS_ATTENTION_PER_LEVEL)


class _AttentionBlock(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        # zero output projection: the block starts out as (almost) the identity
        self.attn = MultiHeadAttention(d, heads, rng, zero_out=True)
        self.norm = LayerNorm(d)

    def __call__(self, q_path: Tensor, q_ana: Tensor):
        a, weights = self.attn(q_path, q_ana, q_ana)
        return self.norm(q_path + a), weights


class QueryMixer(Module):
    """Callable ``(q_ana, q_path, stage) -> (q_ana', q_path', attention or None)``.

    Parameter-free for identity/sum/sum_2way/mean; one shared attention block
    for ``cross_attention``; one block per decoder stage for
    ``cross_attention_per_level``.
    """

    def __init__(self, kind: str, d: int = 16, num_stages: int = 1, heads: int = 4,
                 rng: np.random.Generator | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown mixing strategy {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.blocks: list[_AttentionBlock] = []
        if kind in ATTENTION_KINDS:
            rng = rng if rng is not None else np.random.default_rng(0)
            n = 1 if kind == CROSS_ATTENTION else num_stages
            self.blocks = [_AttentionBlock(d, heads, rng) for _ in range(n)]

    @property
    def is_attention(self) -> bool:
        return self.kind in ATTENTION_KINDS

    def __call__(self, q_ana: Tensor, q_path: Tensor, stage: int):
        return mix(q_ana, q_path, stage, self)


def mix(q_ana: Tensor, q_path: Tensor, stage: int, strategy: QueryMixer):
    """Enrich pathology queries with anatomy queries.

    The anatomy queries are returned untouched (same object) by every
    strategy except ``sum_2way``.
    """
    if q_ana.shape != q_path.shape:
        raise ValueError(f"query sets differ in shape: anatomy {q_ana.shape} vs pathology {q_path.shape}")
    kind = strategy.kind
    if kind == IDENTITY:
        return q_ana, q_path, None
    if kind == SUM:
        return q_ana, q_path + q_ana, None
    if kind == SUM_2WAY:
        both = q_path + q_ana
        return both, both, None
    if kind == MEAN:
        return q_ana, (q_path + q_ana) * 0.5, None
    if kind == CROSS_ATTENTION:
        block = strategy.blocks[0]
    else:
        if stage >= len(strategy.blocks):
            raise IndexError(f"no mixer block for stage {stage} ({len(strategy.blocks)} configured)")
        block = strategy.blocks[stage]
    new_path, weights = block(q_path, q_ana)
    return q_ana, new_path, weights


@dataclass(frozen=True)
class AttendedEntry:
    anatomy_class: int
    mass: float


def attended_anatomy_report(ca_weights, anatomy_assignments, k: int = 5, pathology_queries=None,
                            strategy: QueryMixer | str | None = None) -> list[AttendedEntry]:
    """Rank anatomy classes by the attention mass pathology queries spend on them.

    ``ca_weights`` is a sequence of per-stage arrays (B, heads, Qp, Qa) or
    (Qp, Qa); heads are averaged.  ``anatomy_assignments`` maps each anatomy
    query to its matched class, either a (Qa,) or (B, Qa) integer array with
    -1 for unmatched queries.  ``pathology_queries`` optionally restricts the
    pathology queries counted (boolean (Qp,) or (B, Qp)).  Mass is the mean
    over counted (sample, stage, pathology query) triples, so entries sum to
    at most 1; attention on unmatched anatomy queries is dropped.
    """
    if strategy is not None:
        kind = strategy.kind if isinstance(strategy, QueryMixer) else strategy
        if kind not in ATTENTION_KINDS:
            raise ValueError(f"attended-anatomy report needs an attention-based mixer, got {kind!r}")
    stages = [np.asarray(w, dtype=np.float64) for w in ca_weights]
    if not stages:
        raise ValueError("no attention maps given")
    stages = [w.mean(axis=1) if w.ndim == 4 else w[None] for w in stages]  # (B, Qp, Qa)
    B, Qp, Qa = stages[0].shape
    assign = np.broadcast_to(np.asarray(anatomy_assignments, dtype=np.int64), (B, Qa))
    if pathology_queries is None:
        sel = np.ones((B, Qp), dtype=bool)
    else:
        sel = np.broadcast_to(np.asarray(pathology_queries, dtype=bool), (B, Qp))
    count = sel.sum() * len(stages)
    if count == 0:
        return []
    per_query = np.zeros((B, Qa))
    for w in stages:
        per_query += (w * sel[:, :, None]).sum(axis=1)
    totals: dict[int, float] = {}
    for b in range(B):
        for j in range(Qa):
            c = int(assign[b, j])
            if c >= 0:
                totals[c] = totals.get(c, 0.0) + per_query[b, j]
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return [AttendedEntry(c, m / count) for c, m in ranked[:k]]
