"""Masked-attention query decoders for the anatomy and pathology branches."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import JointEmbeddings
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter

ANATOMY = "anatomy"
PATHOLOGY = "pathology"


@dataclass
class QuerySet:
    queries: Tensor  # (B, Q, d)
    branch: str
    stage: int


def attention_mask_from_logits(logits: np.ndarray, hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Threshold mask logits at sigmoid >= 0.5 after average-pooling to ``hw``.

    ``logits`` is (B, Q, H0, W0).  Returns ``(permit, fallback)`` where
    ``permit`` is (B, Q, h*w) and ``fallback`` (B, Q) flags queries whose
    mask came out empty; those rows are opened up completely.
    """
    B, Q, H0, W0 = logits.shape
    h, w = hw
    if H0 % h or W0 % w:
        raise ValueError(f"cannot pool {H0}x{W0} logits to {h}x{w}")
    fy, fx = H0 // h, W0 // w
    pooled = logits.reshape(B, Q, h, fy, w, fx).mean(axis=(3, 5)) if (fy, fx) != (1, 1) else logits
    permit = (pooled >= 0.0).reshape(B, Q, h * w)
    fallback = ~permit.any(axis=2)
    permit[fallback] = True
    return permit, fallback


def predict_masks_for_attention(q: Tensor, J: JointEmbeddings, hw: tuple[int, int]):
    """Attention mask for the next decoder layer from the current queries."""
    logits = (q.data @ J.fine.data).reshape(q.shape[0], q.shape[1], *J.fine_hw)
    return attention_mask_from_logits(logits, hw)


class DecoderLayer(Module):
    """Masked cross-attention, then self-attention, then feed-forward; each residual + post-norm."""

    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator):
        self.cross = MultiHeadAttention(d, heads, rng)
        self.norm_cross = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_self = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, rng)
        self.norm_ffn = LayerNorm(d)

    def __call__(self, q: Tensor, tokens: Tensor, pos: np.ndarray, permit: np.ndarray | None = None) -> Tensor:
        forbid = None if permit is None else ~permit
        a, _ = self.cross(q, tokens + pos, tokens, forbid)
        q = self.norm_cross(q + a)
        s, _ = self.self_attn(q, q, q)
        q = self.norm_self(q + s)
        return self.norm_ffn(q + self.ffn(q))


def decoder_layer(layer: DecoderLayer, q: QuerySet, J: JointEmbeddings, level: int,
                  permit: np.ndarray | None) -> QuerySet:
    """Apply one decoder layer of ``layer`` to queries against coarse level ``level`` (1-based)."""
    tokens = J.tokens[level - 1]
    if permit is not None and permit.shape != (q.queries.shape[0], q.queries.shape[1], tokens.shape[1]):
        raise ValueError(f"attention mask shape {permit.shape} does not match queries x pixels")
    return QuerySet(layer(q.queries, tokens, J.pos[level - 1], permit), q.branch, q.stage + 1)


class QueryDecoder(Module):
    """One branch: learnable initial queries, L decoder layers and a class head."""

    def __init__(self, rng: np.random.Generator, d: int, num_queries: int, num_layers: int, num_classes: int,
                 heads: int = 4, ffn: int | None = None, branch: str = PATHOLOGY):
        self.branch = branch
        self.num_queries = num_queries
        self.query_embed = parameter(rng.normal(0.0, 0.02, size=(num_queries, d)))
        self.layers = [DecoderLayer(d, heads, ffn or 2 * d, rng) for _ in range(num_layers)]
        self.classifier = Linear(d, num_classes + 1, rng)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def initial(self, batch: int) -> QuerySet:
        idx = np.broadcast_to(np.arange(self.num_queries), (batch, self.num_queries))
        return QuerySet(ad.embedding(self.query_embed, idx), self.branch, 0)


def level_schedule(num_layers: int, num_coarse: int) -> list[int]:
    """Coarse level visited by each layer: coarsest first, cycling (n, ..., 1, n, ...)."""
    order = list(range(num_coarse, 0, -1))
    return [order[i % num_coarse] for i in range(num_layers)]


@dataclass
class DecoderTrace:
    """Per-stage queries (stage 0 = initial) and bookkeeping from :func:`run_decoders`."""

    anatomy: list[Tensor] = field(default_factory=list)
    pathology: list[Tensor] = field(default_factory=list)
    mix_attention: list[np.ndarray] = field(default_factory=list)
    fallback: dict[str, list[np.ndarray]] = field(default_factory=lambda: {ANATOMY: [], PATHOLOGY: []})
    levels: list[int] = field(default_factory=list)


def run_decoders(J: JointEmbeddings, ana: QueryDecoder | None, path: QueryDecoder | None, mixer=None,
                 batch: int | None = None):
    """Evolve both query sets scale by scale; mix after every pathology layer.

    Either branch may be absent.  ``mixer`` is a :class:`apexseg.mixing.QueryMixer`
    or ``None`` (identity).  Returns ``(q_ana, q_path, trace)`` with the final
    query tensors (or ``None`` for a missing branch).
    """
    B = J.fine.shape[0] if batch is None else batch
    branches = [b for b in (ana, path) if b is not None]
    if not branches:
        raise ValueError("run_decoders needs at least one branch")
    L = branches[0].num_layers
    if any(b.num_layers != L for b in branches):
        raise ValueError("branches must have equal depth")
    trace = DecoderTrace(levels=level_schedule(L, len(J.tokens)))
    qa = ana.initial(B) if ana is not None else None
    qp = path.initial(B) if path is not None else None
    if qa is not None:
        trace.anatomy.append(qa.queries)
    if qp is not None:
        trace.pathology.append(qp.queries)
    for stage, level in enumerate(trace.levels):
        hw = J.hw[level - 1]
        if qa is not None:
            permit, fb = predict_masks_for_attention(qa.queries, J, hw)
            trace.fallback[ANATOMY].append(fb)
            qa = decoder_layer(ana.layers[stage], qa, J, level, permit)
        if qp is not None:
            permit, fb = predict_masks_for_attention(qp.queries, J, hw)
            trace.fallback[PATHOLOGY].append(fb)
            qp = decoder_layer(path.layers[stage], qp, J, level, permit)
            if qa is not None and mixer is not None:
                new_a, new_p, weights = mixer(qa.queries, qp.queries, stage)
                qa = QuerySet(new_a, qa.branch, qa.stage)
                qp = QuerySet(new_p, qp.branch, qp.stage)
                if weights is not None:
                    trace.mix_attention.append(weights)
        if qa is not None:
            trace.anatomy.append(qa.queries)
        if qp is not None:
            trace.pathology.append(qp.queries)
    return (qa.queries if qa is not None else None), (qp.queries if qp is not None else None), trace
