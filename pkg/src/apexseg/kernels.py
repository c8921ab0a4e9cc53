"""Inner loops that dominate matching and metric runtime.

Each kernel exists twice: a numba ``@njit`` version and a pure numpy (or
scipy) fallback.  The numba path is used when numba imports and the
environment variable ``APEXSEG_NUMBA`` is not ``"0"``.  Both paths return
identical results; ``benchmarks/bench_kernels.py`` times them side by side.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is the optional "fast" extra
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("APEXSEG_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# rectangular assignment (shortest augmenting path with potentials)


def _assign_rows_numpy(cost: np.ndarray) -> np.ndarray:
    """Optimal column for each row of an n x m cost matrix, n <= m."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    a = np.zeros((n + 1, m + 1))
    a[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = a[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    ans = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            ans[p[j] - 1] = j - 1
    return ans


if HAS_NUMBA:

    @njit(cache=True)
    def _assign_rows_numba(cost):
        n, m = cost.shape
        u = np.zeros(n + 1)
        v = np.zeros(m + 1)
        p = np.zeros(m + 1, dtype=np.int64)
        way = np.zeros(m + 1, dtype=np.int64)
        minv = np.empty(m + 1)
        used = np.empty(m + 1, dtype=np.bool_)
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            minv[:] = np.inf
            used[:] = False
            while True:
                used[j0] = True
                i0 = p[j0]
                delta = np.inf
                j1 = 0
                for j in range(1, m + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(m + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while j0 != 0:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
        ans = np.full(n, -1, dtype=np.int64)
        for j in range(1, m + 1):
            if p[j] != 0:
                ans[p[j] - 1] = j - 1
        return ans


def linear_assignment(cost: np.ndarray, use_numba: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost injective assignment; returns ``(rows, cols)`` sorted by row.

    Handles either orientation: the smaller side is always fully matched.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    fast = USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    solve = _assign_rows_numba if fast else _assign_rows_numpy
    if n <= m:
        cols = solve(cost)
        return np.arange(n, dtype=np.int64), cols
    rows_for_cols = solve(np.ascontiguousarray(cost.T))
    order = np.argsort(rows_for_cols, kind="stable")
    return rows_for_cols[order], np.arange(m, dtype=np.int64)[order]


# ---------------------------------------------------------------------------
# boundary band: mask pixels within Euclidean distance r of the mask contour


def contour(mask: np.ndarray) -> np.ndarray:
    """Mask pixels 4-adjacent to background; outside the image counts as background."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def _band_numpy(mask: np.ndarray, radius: float) -> np.ndarray:
    edge = contour(mask)
    band = np.zeros(mask.shape, dtype=bool)
    ey, ex = np.nonzero(edge)
    if ey.size == 0:
        return band
    my, mx = np.nonzero(mask)
    r2 = radius * radius
    for s in range(0, my.size, 4096):
        dy = my[s:s + 4096, None] - ey[None, :]
        dx = mx[s:s + 4096, None] - ex[None, :]
        near = ((dy * dy + dx * dx) <= r2).any(axis=1)
        band[my[s:s + 4096][near], mx[s:s + 4096][near]] = True
    return band


if HAS_NUMBA:

    @njit(cache=True)
    def _band_numba(mask, edge, r2):
        H, W = mask.shape
        ne = 0
        for y in range(H):
            for x in range(W):
                if edge[y, x]:
                    ne += 1
        ey = np.empty(ne, dtype=np.int64)
        ex = np.empty(ne, dtype=np.int64)
        k = 0
        for y in range(H):
            for x in range(W):
                if edge[y, x]:
                    ey[k] = y
                    ex[k] = x
                    k += 1
        band = np.zeros((H, W), dtype=np.bool_)
        for y in range(H):
            for x in range(W):
                if mask[y, x]:
                    for e in range(ne):
                        dy = y - ey[e]
                        dx = x - ex[e]
                        if dy * dy + dx * dx <= r2:
                            band[y, x] = True
                            break
        return band


def boundary_band(mask: np.ndarray, radius: float, use_numba: bool | None = None) -> np.ndarray:
    """Pixels of ``mask`` whose Euclidean distance to its contour is <= ``radius``."""
    mask = np.ascontiguousarray(mask, dtype=bool)
    fast = USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA)
    if fast:
        return _band_numba(mask, contour(mask), float(radius) ** 2)
    return _band_numpy(mask, float(radius))


def warmup() -> None:
    """Trigger JIT compilation (cached on disk after the first process)."""
    if not USE_NUMBA:
        return
    linear_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    boundary_band(np.ones((3, 3), dtype=bool), 1.0)


__all__ = [
    "HAS_NUMBA",
    "USE_NUMBA",
    "linear_assignment",
    "boundary_band",
    "contour",
    "warmup",
]
