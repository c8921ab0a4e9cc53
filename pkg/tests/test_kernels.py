import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import optimize

from apexseg import kernels
from apexseg.kernels import boundary_band, contour, linear_assignment

BOTH = [False, pytest.param(True, marks=pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba missing"))]


@pytest.mark.parametrize("use_numba", BOTH)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_assignment_matches_scipy(use_numba, n, m, seed):
    cost = np.random.default_rng(seed).normal(size=(n, m))
    r, c = linear_assignment(cost, use_numba=use_numba)
    rs, cs = optimize.linear_sum_assignment(cost)
    assert len(r) == min(n, m)
    assert len(set(r)) == len(r) and len(set(c)) == len(c)
    assert cost[r, c].sum() == pytest.approx(cost[rs, cs].sum(), abs=1e-9)


def test_assignment_brute_force_small():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    best = min(sum(cost[i, p[i]] for i in range(3)) for p in itertools.permutations(range(3)))
    r, c = linear_assignment(cost)
    assert cost[r, c].sum() == best == 5.0


def test_assignment_empty():
    r, c = linear_assignment(np.zeros((3, 0)))
    assert r.size == 0 and c.size == 0


def test_contour_counts_image_border_as_background():
    m = np.ones((3, 3), bool)
    expected = np.ones((3, 3), bool)
    expected[1, 1] = False
    assert np.array_equal(contour(m), expected)


def _band_oracle(mask, r):
    edge = contour(mask)
    ey, ex = np.nonzero(edge)
    out = np.zeros_like(mask)
    for y, x in zip(*np.nonzero(mask)):
        if ((ey - y) ** 2 + (ex - x) ** 2 <= r * r).any():
            out[y, x] = True
    return out


@pytest.mark.parametrize("use_numba", BOTH)
@given(hnp.arrays(bool, (9, 11)), st.floats(0.5, 6.0))
def test_band_matches_brute_force(use_numba, mask, r):
    assert np.array_equal(boundary_band(mask, r, use_numba=use_numba), _band_oracle(mask, r))


def test_numba_and_numpy_paths_agree(rng):
    mask = rng.random((40, 40)) < 0.6
    assert np.array_equal(boundary_band(mask, 2.5, use_numba=False), boundary_band(mask, 2.5, use_numba=True))
    cost = rng.normal(size=(7, 5))
    a = linear_assignment(cost, use_numba=False)
    b = linear_assignment(cost, use_numba=True)
    assert cost[a].sum() == pytest.approx(cost[b].sum())
