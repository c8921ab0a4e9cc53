"""Multi-scale feature extraction and the shared pixel decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter


@dataclass
class MultiScaleFeatures:
    """Feature maps F_0..F_n, each (B, c_i, H_i, W_i), finest first."""

    levels: list[Tensor]

    def __post_init__(self):
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if not (fine.shape[2] > coarse.shape[2] and fine.shape[3] > coarse.shape[3]):
                raise ValueError(f"feature levels must shrink: {fine.shape} then {coarse.shape}")


@dataclass
class JointEmbeddings:
    """Pixel embeddings J_0..J_n with d channels.

    ``fine`` is J_0 as (B, d, H_0*W_0); ``tokens[i-1]`` is J_i as
    (B, H_i*W_i, d) for the coarse levels the decoders attend to, and
    ``pos[i-1]`` the matching (H_i*W_i, d) positional encoding.
    """

    fine: Tensor
    fine_hw: tuple[int, int]
    tokens: list[Tensor]
    hw: list[tuple[int, int]]
    pos: list[np.ndarray]

    @property
    def d(self) -> int:
        return self.fine.shape[1]

    @property
    def levels(self) -> list[Tensor]:
        """All levels as (B, d, H_i, W_i) tensors, finest first."""
        B, d = self.fine.shape[:2]
        out = [self.fine.reshape(B, d, *self.fine_hw)]
        for tok, (h, w) in zip(self.tokens, self.hw):
            out.append(tok.transpose(0, 2, 1).reshape(B, d, h, w))
        return out


class Backbone(Module):
    """Strided conv net: stage 0 reaches stride 4, each later stage halves again.

    Two 3x3 convolutions per stage; the first of each stage is strided.
    """

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 128), in_channels: int = 3):
        self.widths = tuple(widths)
        stages = []
        c_prev = in_channels
        for i, c in enumerate(self.widths):
            second_stride = 2 if i == 0 else 1
            stages.append([Conv2d(c_prev, c, 3, rng, stride=2), Conv2d(c, c, 3, rng, stride=second_stride)])
            c_prev = c
        self.stages = stages

    @property
    def num_levels(self) -> int:
        return len(self.widths)

    def check_input(self, shape: tuple[int, ...]) -> None:
        factor = 2 ** (self.num_levels + 1)
        if len(shape) != 4 or shape[2] % factor or shape[3] % factor:
            raise ValueError(f"input spatial extent {shape[2:]} must be divisible by {factor} (= 2**(levels+1))")

    def __call__(self, x: Tensor) -> MultiScaleFeatures:
        self.check_input(x.shape)
        levels = []
        h = x
        for conv_a, conv_b in self.stages:
            h = ad.relu(conv_b(ad.relu(conv_a(h))))
            levels.append(h)
        return MultiScaleFeatures(levels)


def sine_position_encoding(h: int, w: int, d: int) -> np.ndarray:
    """2-D sinusoidal encoding, (h*w, d): first half encodes rows, second half columns."""
    if d % 4:
        raise ValueError(f"positional encoding needs d divisible by 4, got {d}")
    quarter = d // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    py = ys[:, None] * freqs[None]
    px = xs[:, None] * freqs[None]
    enc_y = np.concatenate([np.sin(py), np.cos(py)], axis=1)
    enc_x = np.concatenate([np.sin(px), np.cos(px)], axis=1)
    grid_y = np.repeat(enc_y[:, None, :], w, axis=1)
    grid_x = np.repeat(enc_x[None, :, :], h, axis=0)
    return np.concatenate([grid_y, grid_x], axis=2).reshape(h * w, d)


class EncoderLayer(Module):
    """Post-norm self-attention + feed-forward over tokens."""

    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = FeedForward(d, ffn, rng)
        self.norm2 = LayerNorm(d)

    def __call__(self, x: Tensor, pos: np.ndarray) -> Tensor:
        qk = x + pos
        a, _ = self.attn(qk, qk, x)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x))


class PixelDecoder(Module):
    """Projects F_i to d channels, mixes coarse levels with self-attention, fuses J_1 into J_0."""

    def __init__(self, rng: np.random.Generator, widths=(16, 32, 64, 128), d: int = 16, rounds: int = 2,
                 heads: int = 4, ffn: int | None = None):
        self.d = d
        self.proj = [Linear(c, d, rng) for c in widths]
        self.level_embed = parameter(np.zeros((len(widths) - 1, d)))
        self.layers = [EncoderLayer(d, heads, ffn or 2 * d, rng) for _ in range(rounds)]
        self._pos_cache: dict[tuple[int, int], np.ndarray] = {}

    def _pos(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = sine_position_encoding(h, w, self.d)
        return self._pos_cache[key]

    def __call__(self, feats: MultiScaleFeatures) -> JointEmbeddings:
        levels = feats.levels
        B = levels[0].shape[0]
        tokens, hw, pos = [], [], []
        for i, f in enumerate(levels[1:], start=1):
            _, c, h, w = f.shape
            tokens.append(self.proj[i](f.reshape(B, c, h * w).transpose(0, 2, 1)))
            hw.append((h, w))
            pos.append(self._pos(h, w))
        sizes = [h * w for h, w in hw]
        if self.layers:
            x = ad.concat(tokens, axis=1)
            level_pos = np.concatenate(pos, axis=0)
            lvl = ad.embedding(self.level_embed, np.repeat(np.arange(len(sizes)), sizes))
            p = lvl + level_pos
            for layer in self.layers:
                x = layer(x, p)
            bounds = np.cumsum([0] + sizes)
            tokens = [x[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]
        _, c0, h0, w0 = levels[0].shape
        fine = self.proj[0](levels[0].reshape(B, c0, h0 * w0).transpose(0, 2, 1)).transpose(0, 2, 1)
        h1, w1 = hw[0]
        coarse = tokens[0].transpose(0, 2, 1).reshape(B, self.d, h1, w1)
        up = ad.upsample_nearest(coarse, h0 // h1).reshape(B, self.d, h0 * w0)
        return JointEmbeddings(fine=fine + up, fine_hw=(h0, w0), tokens=tokens, hw=hw, pos=pos)
