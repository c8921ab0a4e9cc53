"""Random small-input cases for every autodiff primitive (shared by unit and acceptance tests)."""

import numpy as np

from apexseg import autodiff as ad


def _shape(rng, ndim, hi=5):
    return tuple(int(v) for v in rng.integers(1, hi + 1, size=ndim))


def cases(rng):
    """Yield ``(name, f, x)`` with ``f`` mapping a Tensor to a scalar Tensor."""
    s = _shape(rng, 2)
    other = rng.normal(size=s)
    w = rng.normal(size=s)
    yield "add", lambda x: ad.sum(ad.mul(ad.add(x, other), w)), rng.normal(size=s)
    yield "add_broadcast", lambda x: ad.sum(ad.mul(ad.add(other, x), w)), rng.normal(size=s[1:])
    yield "sub", lambda x: ad.sum(ad.mul(ad.sub(other, x), w)), rng.normal(size=s)
    yield "mul", lambda x: ad.sum(ad.mul(ad.mul(x, x), w)), rng.normal(size=s)
    yield "div", lambda x: ad.sum(ad.div(w, ad.add(ad.mul(x, x), 1.0))), rng.normal(size=s)
    yield "neg", lambda x: ad.sum(ad.mul(ad.neg(x), w)), rng.normal(size=s)
    k = int(rng.integers(1, 6))
    b = rng.normal(size=(s[1], k))
    wk = rng.normal(size=(s[0], k))
    yield "matmul_left", lambda x: ad.sum(ad.mul(ad.matmul(x, b), wk)), rng.normal(size=s)
    a = rng.normal(size=(k, s[0]))
    w2 = rng.normal(size=(k, s[1]))
    yield "matmul_right", lambda x: ad.sum(ad.mul(ad.matmul(a, x), w2)), rng.normal(size=s)
    s3 = _shape(rng, 3)
    bb = rng.normal(size=(s3[2], 2))
    w3 = rng.normal(size=(s3[0], s3[1], 2))
    yield "matmul_batched", lambda x: ad.sum(ad.mul(ad.matmul(x, bb), w3)), rng.normal(size=s3)
    wt = rng.normal(size=(s3[2], s3[0], s3[1]))
    yield "transpose", lambda x: ad.sum(ad.mul(ad.transpose(x, (2, 0, 1)), wt)), rng.normal(size=s3)
    wr = rng.normal(size=(int(np.prod(s3)),))
    yield "reshape", lambda x: ad.sum(ad.mul(ad.reshape(x, (-1,)), wr)), rng.normal(size=s3)
    yield "getitem_slice", lambda x: ad.sum(ad.mul(x[:, :1], w[:, :1])), rng.normal(size=s)
    rows = rng.integers(0, s[0], size=4)
    wf = rng.normal(size=(4, s[1]))
    yield "getitem_fancy", lambda x: ad.sum(ad.mul(x[rows], wf)), rng.normal(size=s)
    yield "concat", lambda x: ad.sum(ad.mul(ad.concat([x, ad.mul(x, 2.0)], axis=1),
                                            np.concatenate([w, other], axis=1))), rng.normal(size=s)
    yield "sum_axis", lambda x: ad.sum(ad.mul(ad.sum(x, axis=0), w[0])), rng.normal(size=s)
    yield "mean_axis", lambda x: ad.sum(ad.mul(ad.mean(x, axis=1, keepdims=True), w[:, :1])), rng.normal(size=s)
    yield "exp", lambda x: ad.sum(ad.mul(ad.exp(x), w)), rng.normal(size=s)
    yield "log", lambda x: ad.sum(ad.mul(ad.log(x), w)), rng.uniform(0.5, 2.0, size=s)
    yield "sigmoid", lambda x: ad.sum(ad.mul(ad.sigmoid(x), w)), rng.normal(size=s)
    # keep relu inputs away from the kink
    yield "relu", lambda x: ad.sum(ad.mul(ad.relu(x), w)), rng.choice([-1, 1], size=s) * rng.uniform(0.1, 2, size=s)
    yield "gelu", lambda x: ad.sum(ad.mul(ad.gelu(x), w)), rng.normal(size=s)
    yield "softplus", lambda x: ad.sum(ad.mul(ad.softplus(x), w)), rng.normal(size=s)
    yield "softmax", lambda x: ad.sum(ad.mul(ad.softmax(x, axis=-1), w)), rng.normal(size=s)
    yield "softmax_axis0", lambda x: ad.sum(ad.mul(ad.softmax(x, axis=0), w)), rng.normal(size=s)
    yield "log_softmax", lambda x: ad.sum(ad.mul(ad.log_softmax(x, axis=-1), w)), rng.normal(size=s)
    d = s[1] + 1
    g, be = rng.normal(size=d), rng.normal(size=d)
    wl = rng.normal(size=(s[0], d))
    yield "layer_norm", lambda x: ad.sum(ad.mul(ad.layer_norm(x, g, be), wl)), rng.normal(size=(s[0], d))
    xin = rng.normal(size=(s[0], d))
    yield "layer_norm_gamma", lambda x: ad.sum(ad.mul(ad.layer_norm(xin, x, be), wl)), rng.normal(size=d)
    mask = rng.random(size=s) < 0.4
    yield "masked_fill", lambda x: ad.sum(ad.mul(ad.masked_fill(x, mask, -3.0), w)), rng.normal(size=s)
    idx = rng.integers(0, s[0], size=(3,))
    we = rng.normal(size=(3, s[1]))
    yield "embedding", lambda x: ad.sum(ad.mul(ad.embedding(x, idx), we)), rng.normal(size=s)
    C, O = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    H = int(rng.integers(3, 6))
    stride = int(rng.integers(1, 3))
    wconv = rng.normal(size=(O, C, 3, 3))
    xconv = rng.normal(size=(2, C, H, H))
    probe = rng.normal(size=ad.conv2d(xconv, wconv, None, stride, 1).shape)
    yield "conv2d_input", lambda x: ad.sum(ad.mul(ad.conv2d(x, wconv, None, stride, 1), probe)), xconv
    yield "conv2d_weight", lambda x: ad.sum(ad.mul(ad.conv2d(xconv, x, None, stride, 1), probe)), wconv
    yield "conv2d_bias", lambda x: ad.sum(ad.mul(ad.conv2d(xconv, wconv, x, stride, 1), probe)), rng.normal(size=O)
    xu = rng.normal(size=(1, 2, 2, 3))
    wu = rng.normal(size=(1, 2, 4, 6))
    yield "upsample_nearest", lambda x: ad.sum(ad.mul(ad.upsample_nearest(x, 2), wu)), xu
