"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every model computation in this package is composed from the primitives
below, so any gradient can be audited with :func:`grad_check`.

Broadcasting is deliberately narrow: binary ops accept operands of equal
shape, or one operand whose shape is a trailing suffix of the other's (a
leading-axis batch broadcast), or a scalar.  Anything else needs an explicit
reshape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "sum",
    "mean",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "gelu",
    "softplus",
    "softmax",
    "log_softmax",
    "layer_norm",
    "masked_fill",
    "embedding",
    "conv2d",
    "upsample_nearest",
    "grad_check",
    "grad_check_params",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's broadcasting/contraction rule."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [GradientTape()]
    return stack


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class GradientTape:
    """Ordered record of executed primitive ops.

    Usable as a context manager to scope recording; outside any explicit
    tape, ops land on a per-thread default tape which ``Tensor.backward``
    consumes and clears.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        """Propagate from ``loss`` in exact reverse execution order.

        Gradients are accumulated into the ``grad`` buffer of every leaf
        tensor with ``requires_grad`` reachable from ``loss``.  The tape is
        cleared afterwards.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward: implicit gradient needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = inp
        for key, g in grads.items():
            t = tensors[key]
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        self.clear()


def _current_tape() -> GradientTape:
    return _tape_stack()[-1]


class Tensor:
    """Row-major float64 array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        _current_tape().backward(self, grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        _current_tape().record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise binary ops


def _bcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b} (only leading-axis batch broadcast is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result("mul", ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _bcast_shape("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# contraction and shape ops


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch axes must match or be absent on one side."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        short, long_ = (la, lb) if len(la) < len(lb) else (lb, la)
        if long_[len(long_) - len(short):] != short:
            raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ _swap(bd), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(_swap(ad) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(old),))


def _is_basic_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis for k in keys)


def getitem(x, key) -> Tensor:
    """Numpy-style indexing; fancy indices may repeat (gradients accumulate)."""
    x = _as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(key)

    def backward(g):
        z = np.zeros(shape)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _result("getitem", np.array(x.data[key], dtype=np.float64), (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape {t.shape} does not conform with {ts[0].shape} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result("concat", np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)
    return _result("sum", out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    n = x.data.size / max(out.size, 1)
    return _result("mean", out, (x,), lambda g: (_expand_reduced(g, shape, axis, keepdims) / n,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result("log", out, (x,), lambda g: (g / xd,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = special.expit(x.data)
    return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _SQRT_HALF))

    def backward(g):
        return (g * (cdf + xd * _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)),)

    return _result("gelu", xd * cdf, (x,), backward)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = _as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _result("softplus", out, (x,), lambda g: (g * special.expit(xd),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gamma.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts numpy-style."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        keep = ~np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} does not broadcast to {x.shape}") from None
    return _result("masked_fill", np.where(keep, x.data, value), (x,), lambda g: (g * keep,))


def embedding(weight, indices) -> Tensor:
    """Row lookup ``weight[indices]``."""
    weight = _as_tensor(weight)
    idx = np.asarray(indices, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding: index out of range for table of {weight.shape[0]} rows")
    shape = weight.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (z,)

    return _result("embedding", weight.data[idx], (weight,), backward)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B, C, H, W) inputs via im2col."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    inputs = (x, weight) if bias is None else (x, weight, _as_tensor(bias))
    if bias is not None and inputs[2].shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {inputs[2].shape} does not match {weight.shape[0]} output channels")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = H + 2 * p, W + 2 * p
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    w2 = weight.data.reshape(O, -1)
    out = cols @ w2.T
    if bias is not None:
        out = out + inputs[2].data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.shape)
        if bias is not None and inputs[2].requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _result("conv2d", np.ascontiguousarray(out), inputs, backward)


def upsample_nearest(x, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    x = _as_tensor(x)
    f = int(factor)
    shape = x.shape
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)

    def backward(g):
        h, w = shape[-2], shape[-1]
        return (g.reshape(shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1)),)

    return _result("upsample_nearest", out, (x,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def _scalar(y: Tensor) -> float:
    if not isinstance(y, Tensor) or y.data.size != 1:
        shape = getattr(y, "shape", type(y))
        raise ShapeError(f"grad_check: function must return a scalar tensor, got {shape}")
    return float(y.data.reshape(()))


def _central_difference(f: Callable[[], Tensor], arr: np.ndarray, flat_idx: int, h: float) -> float:
    flat = arr.reshape(-1)
    orig = flat[flat_idx]
    flat[flat_idx] = orig + h
    with no_grad():
        fp = _scalar(f())
    flat[flat_idx] = orig - h
    with no_grad():
        fm = _scalar(f())
    flat[flat_idx] = orig
    return (fp - fm) / (2.0 * h)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    x = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    with GradientTape() as tape:
        y = f(x)
        _scalar(y)
        tape.backward(y)
    analytic = x.grad.reshape(-1).copy()
    worst = 0.0
    for i in range(x.data.size):
        num = _central_difference(lambda: f(x), x.data, i, h)
        worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but over several leaf tensors at once.

    ``per_param`` limits the number of (randomly chosen) elements probed per
    tensor; ``None`` probes every element.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with GradientTape() as tape:
        y = f()
        _scalar(y)
        tape.backward(y)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1).copy()
        n = p.data.size
        idx = range(n) if per_param is None or per_param >= n else rng.choice(n, per_param, replace=False)
        for i in idx:
            num = _central_difference(f, p.data, int(i), h)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst
