"""Assembled segmentation models for every anatomy-incorporation variant."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .backbone import Backbone, JointEmbeddings, PixelDecoder
from .decoder import ANATOMY, PATHOLOGY, DecoderTrace, QueryDecoder, run_decoders
from .losses import SegmentPrediction, StagePredictions, predict_segments, semantic_map
from .mixing import IDENTITY, QueryMixer
from .nn import Module

# incorporation modes
BASELINE = "baseline"
PRETRAIN = "pretrain"
MULTITASK = "multitask"
ANA_IN = "ana_in"
ANA_IN_AUX = "ana_in+aux"
INCORPORATIONS = (BASELINE, PRETRAIN, MULTITASK, ANA_IN, ANA_IN_AUX)

# sharing levels for dual-head models
NO_SHARING = "none"
SHARED_BACKBONE = "shared_backbone"
SHARED_PIXELDECODER = "shared_pixeldecoder"
SHARINGS = (NO_SHARING, SHARED_BACKBONE, SHARED_PIXELDECODER)

JOINT = "joint"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128)
    rounds: int = 2
    heads: int = 4
    num_layers: int = 6
    num_queries: int = 20
    ffn: int | None = None
    mixer_heads: int = 4


@dataclass
class ModelOutput:
    """Deep-supervision predictions per head (``anatomy``, ``pathology`` or ``joint``)."""

    heads: dict[str, StagePredictions] = field(default_factory=dict)
    traces: dict[str, DecoderTrace] = field(default_factory=dict)
    embeddings: dict[str, JointEmbeddings] = field(default_factory=dict)


def anatomy_input(images: np.ndarray, anatomy: np.ndarray, num_anatomy: int) -> np.ndarray:
    """Write anatomy labels scaled to [0, 1] into the empty third image channel."""
    out = np.array(images, dtype=np.float64, copy=True)
    out[:, 2] = np.asarray(anatomy, dtype=np.float64) / num_anatomy
    return out


class SegModel(Module):
    """Backbone(s), pixel decoder(s) and query decoders wired per variant.

    * ``baseline``/``ana_in``: one pathology decoder.
    * ``pretrain``: pathology decoder plus an anatomy decoder used only for
      the anatomy pre-training phase.
    * ``multitask``/``ana_in+aux``: one joint decoder over A + P classes.
    * dual-head (``sharing`` set): separate anatomy and pathology decoders
      sharing the backbone only, or backbone and pixel decoder; the latter
      may mix anatomy queries into pathology queries.
    """

    def __init__(self, incorporation: str, num_anatomy: int, num_pathology: int, sharing: str = NO_SHARING,
                 mixing: str = IDENTITY, config: ModelConfig = ModelConfig(), rng: np.random.Generator | None = None):
        if incorporation not in INCORPORATIONS:
            raise ValueError(f"unknown incorporation {incorporation!r}")
        if sharing not in SHARINGS:
            raise ValueError(f"unknown sharing {sharing!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.config = c
        self.incorporation = incorporation
        self.sharing = sharing
        self.mixing = mixing
        self.num_anatomy = num_anatomy
        self.num_pathology = num_pathology
        self.backbone = Backbone(rng, c.widths)
        self.pixel_decoder = PixelDecoder(rng, c.widths, c.d, c.rounds, c.heads, c.ffn)

        def decoder(classes: int, branch: str) -> QueryDecoder:
            return QueryDecoder(rng, c.d, c.num_queries, c.num_layers, classes, c.heads, c.ffn, branch)

        self.anatomy_decoder = None
        self.pathology_decoder = None
        self.joint_decoder = None
        self.anatomy_pixel_decoder = None
        self.mixer = None
        if incorporation in (MULTITASK, ANA_IN_AUX):
            self.joint_decoder = decoder(num_anatomy + num_pathology, PATHOLOGY)
        else:
            self.pathology_decoder = decoder(num_pathology, PATHOLOGY)
        if incorporation == PRETRAIN or sharing != NO_SHARING:
            self.anatomy_decoder = decoder(num_anatomy, ANATOMY)
        if sharing == SHARED_BACKBONE:
            self.anatomy_pixel_decoder = PixelDecoder(rng, c.widths, c.d, c.rounds, c.heads, c.ffn)
        if sharing == SHARED_PIXELDECODER and mixing != IDENTITY:
            self.mixer = QueryMixer(mixing, c.d, c.num_layers, c.mixer_heads, rng)

    @property
    def uses_anatomy_input(self) -> bool:
        return self.incorporation in (ANA_IN, ANA_IN_AUX)

    @property
    def head_names(self) -> list[str]:
        names = []
        if self.anatomy_decoder is not None:
            names.append(ANATOMY)
        if self.pathology_decoder is not None:
            names.append(PATHOLOGY)
        if self.joint_decoder is not None:
            names.append(JOINT)
        return names

    def branch_parameters(self, branch: str) -> list[Tensor]:
        """Parameters owned by one branch's decoder (plus its private pixel decoder)."""
        mods = {ANATOMY: [self.anatomy_decoder, self.anatomy_pixel_decoder],
                PATHOLOGY: [self.pathology_decoder, self.mixer], JOINT: [self.joint_decoder]}[branch]
        return [p for m in mods if m is not None for p in m.parameters()]

    def _stages(self, J: JointEmbeddings, queries: list[Tensor], dec: QueryDecoder) -> StagePredictions:
        return StagePredictions([predict_segments(J.fine, q, dec.classifier, J.fine_hw) for q in queries[1:]]
                                or [predict_segments(J.fine, queries[0], dec.classifier, J.fine_hw)])

    def __call__(self, x: Tensor, heads: tuple[str, ...] | None = None) -> ModelOutput:
        """Forward pass; ``heads`` restricts which decoders run (default: all)."""
        want = set(self.head_names if heads is None else heads)
        unknown = want - set(self.head_names)
        if unknown:
            raise ValueError(f"model has no head(s) {sorted(unknown)}; available {self.head_names}")
        feats = self.backbone(x)
        J = self.pixel_decoder(feats)
        out = ModelOutput(embeddings={PATHOLOGY: J})
        if self.joint_decoder is not None and JOINT in want:
            _, q, trace = run_decoders(J, None, self.joint_decoder)
            out.heads[JOINT] = self._stages(J, trace.pathology, self.joint_decoder)
            out.traces[JOINT] = trace
        if self.sharing == SHARED_PIXELDECODER:
            ana = self.anatomy_decoder if (ANATOMY in want or PATHOLOGY in want) else None
            path = self.pathology_decoder if PATHOLOGY in want else None
            _, _, trace = run_decoders(J, ana, path, self.mixer)
            if ANATOMY in want:
                out.heads[ANATOMY] = self._stages(J, trace.anatomy, self.anatomy_decoder)
            if path is not None:
                out.heads[PATHOLOGY] = self._stages(J, trace.pathology, self.pathology_decoder)
            out.traces[PATHOLOGY] = trace
            return out
        if self.pathology_decoder is not None and PATHOLOGY in want:
            _, _, trace = run_decoders(J, None, self.pathology_decoder)
            out.heads[PATHOLOGY] = self._stages(J, trace.pathology, self.pathology_decoder)
            out.traces[PATHOLOGY] = trace
        if self.anatomy_decoder is not None and ANATOMY in want:
            Ja = J
            if self.anatomy_pixel_decoder is not None:
                Ja = self.anatomy_pixel_decoder(feats)
                out.embeddings[ANATOMY] = Ja
            _, _, trace = run_decoders(Ja, self.anatomy_decoder, None)
            out.heads[ANATOMY] = self._stages(Ja, trace.anatomy, self.anatomy_decoder)
            out.traces[ANATOMY] = trace
        return out

    # -- inference helpers --------------------------------------------------

    @property
    def eval_head(self) -> str:
        return JOINT if self.joint_decoder is not None else PATHOLOGY

    def pathology_labels(self, out: ModelOutput, threshold: float = 0.5) -> np.ndarray:
        """Pathology label maps (B, h, w) at mask resolution: 0 background, 1..P."""
        if JOINT in out.heads:
            lab = semantic_map(out.heads[JOINT].final, threshold)
            return np.where(lab > self.num_anatomy, lab - self.num_anatomy, 0)
        return semantic_map(out.heads[PATHOLOGY].final, threshold)

    def anatomy_labels(self, out: ModelOutput, threshold: float = 0.5) -> np.ndarray | None:
        if JOINT in out.heads:
            lab = semantic_map(out.heads[JOINT].final, threshold)
            return np.where(lab <= self.num_anatomy, lab, 0)
        if ANATOMY in out.heads:
            return semantic_map(out.heads[ANATOMY].final, threshold)
        return None

    def pathology_prediction(self, out: ModelOutput) -> SegmentPrediction:
        return out.heads[self.eval_head].final
