"""Parameter containers and standard layers built on :mod:`apexseg.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# exp() of this underflows to exactly 0 after max-subtraction, so it acts as -inf
# while keeping every tensor finite.
NEG_INF = -1e30


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter container, in declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value, seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _walk(name: str, value, seen: set[int]):
    if isinstance(value, Tensor):
        if value.requires_grad and id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        if id(value) in seen:
            return
        seen.add(id(value))
        for k, v in vars(value).items():
            yield from _walk(f"{name}.{k}", v, seen)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(f"{name}.{i}", v, seen)
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(f"{name}.{k}", v, seen)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` of shape (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-limit, limit, size=(d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, padding: int | None = None):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = parameter(rng.normal(0.0, std, size=(c_out, c_in, k, k)))
        self.bias = parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (B, N, d) token sets.

    ``forbid`` is a boolean array broadcastable to (B, Nq, Nk); true entries
    get a logit of effectively -inf.  Returns the output and the attention
    weights (B, heads, Nq, Nk) as a plain array.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, zero_out: bool = False):
        if d % heads:
            raise ValueError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng, zero=zero_out)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, forbid: np.ndarray | None = None):
        B, Nq, d = query.shape
        Nk = key.shape[1]
        h = self.heads
        dh = d // h
        q = self.q_proj(query).reshape(B, Nq, h, dh).transpose(0, 2, 1, 3)
        k = self.k_proj(key).reshape(B, Nk, h, dh).transpose(0, 2, 3, 1)
        v = self.v_proj(value).reshape(B, Nk, h, dh).transpose(0, 2, 1, 3)
        logits = (q @ k) * (1.0 / np.sqrt(dh))
        if forbid is not None:
            forbid = np.asarray(forbid, dtype=bool)
            if forbid.ndim == 3:
                forbid = forbid[:, None]
            logits = ad.masked_fill(logits, forbid, NEG_INF)
        attn = ad.softmax(logits, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Nq, d)
        return self.out_proj(out), attn.data
