"""Small shared builders for tests."""

import numpy as np

from apexseg.autodiff import Tensor
from apexseg.backbone import Backbone, PixelDecoder
from apexseg.decoder import ANATOMY, PATHOLOGY, QueryDecoder

WIDTHS = (16, 32, 64, 128)


def embeddings(seed=0, batch=2, d=16, size=64):
    rng = np.random.default_rng(seed)
    bb = Backbone(rng, WIDTHS)
    pd = PixelDecoder(rng, WIDTHS, d=d)
    return pd(bb(Tensor(rng.normal(size=(batch, 3, size, size)))))


def decoders(seed=1, d=16, queries=5, layers=6, classes=(4, 3)):
    rng = np.random.default_rng(seed)
    ana = QueryDecoder(rng, d, queries, layers, classes[0], branch=ANATOMY)
    path = QueryDecoder(rng, d, queries, layers, classes[1], branch=PATHOLOGY)
    return ana, path
