"""Dynamic time warping and elastic alignment.

Exact DTW fills the full P x Q accumulated-cost matrix with squared
per-sample differences and the {(1,0), (0,1), (1,1)} step pattern.  The
approximate mode is the multi-resolution scheme of FastDTW: halve both
series, solve recursively, project the coarse path back up, widen it by
``radius`` cells and run DTW inside that band only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._parallel import pmap
from ._validation import check_samples
from .traces import TraceSet

MAX_EXACT_CELLS = 10**8


@dataclass(frozen=True)
class WarpPath:
    """Monotone (target index, reference index) pairs from (0, 0) to (P-1, Q-1)."""

    pairs: np.ndarray

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    def validate(self, p_len: int, q_len: int) -> "WarpPath":
        pairs = self.pairs
        if len(pairs) == 0:
            raise ValueError("invalid path: empty")
        if tuple(pairs[0]) != (0, 0) or tuple(pairs[-1]) != (p_len - 1, q_len - 1):
            raise ValueError("invalid path: must run from (0, 0) to (P-1, Q-1)")
        steps = np.diff(pairs, axis=0)
        ok = ((steps == 0) | (steps == 1)).all(axis=1) & (steps.sum(axis=1) > 0)
        if not ok.all():
            raise ValueError("invalid path: steps must be (1,0), (0,1) or (1,1)")
        return self


# --------------------------------------------------------------------------
# numba kernels; the band is given per target row as [lo[i], hi[i]] inclusive


@nb.njit(cache=True, nogil=True)
def _dtw_band(t, r, lo, hi):
    P = t.shape[0]
    offs = np.empty(P + 1, dtype=np.int64)
    offs[0] = 0
    for i in range(P):
        offs[i + 1] = offs[i] + hi[i] - lo[i] + 1
    D = np.empty(offs[P], dtype=np.float64)
    inf = np.inf
    for i in range(P):
        for j in range(lo[i], hi[i] + 1):
            d = t[i] - r[j]
            c = d * d
            if i == 0 and j == 0:
                D[offs[0]] = c
                continue
            best = inf
            if i > 0:
                if lo[i - 1] <= j - 1 <= hi[i - 1]:
                    v = D[offs[i - 1] + j - 1 - lo[i - 1]]
                    if v < best:
                        best = v
                if lo[i - 1] <= j <= hi[i - 1]:
                    v = D[offs[i - 1] + j - lo[i - 1]]
                    if v < best:
                        best = v
            if j - 1 >= lo[i]:
                v = D[offs[i] + j - 1 - lo[i]]
                if v < best:
                    best = v
            D[offs[i] + j - lo[i]] = c + best

    Q = r.shape[0]
    cost = D[offs[P - 1] + Q - 1 - lo[P - 1]]
    # backtrack; ties prefer the diagonal, then the target-advancing step
    path = np.empty((P + Q, 2), dtype=np.int64)
    k = 0
    i = P - 1
    j = Q - 1
    path[k, 0] = i
    path[k, 1] = j
    k += 1
    while i > 0 or j > 0:
        bi = -1
        bj = -1
        best = inf
        if i > 0 and j > 0 and lo[i - 1] <= j - 1 <= hi[i - 1]:
            best = D[offs[i - 1] + j - 1 - lo[i - 1]]
            bi = i - 1
            bj = j - 1
        if i > 0 and lo[i - 1] <= j <= hi[i - 1]:
            v = D[offs[i - 1] + j - lo[i - 1]]
            if v < best:
                best = v
                bi = i - 1
                bj = j
        if j > 0 and j - 1 >= lo[i]:
            v = D[offs[i] + j - 1 - lo[i]]
            if v < best:
                best = v
                bi = i
                bj = j - 1
        i = bi
        j = bj
        path[k, 0] = i
        path[k, 1] = j
        k += 1
    return path[:k][::-1].copy(), cost


def _full_band(p_len: int, q_len: int):
    return np.zeros(p_len, dtype=np.int64), np.full(p_len, q_len - 1, dtype=np.int64)


def _reduce_by_half(x: np.ndarray) -> np.ndarray:
    n = x.size - x.size % 2
    return 0.5 * (x[0:n:2] + x[1:n:2])


def _expand_band(coarse: np.ndarray, p_len: int, q_len: int, radius: int):
    """Project a coarse path onto the fine grid and widen it by ``radius``."""
    pc = coarse[:, 0]
    qc = coarse[:, 1]
    n_coarse_rows = int(pc.max()) + 1
    lo_c = np.full(n_coarse_rows + radius + 1, np.iinfo(np.int64).max, dtype=np.int64)
    hi_c = np.full(n_coarse_rows + radius + 1, -1, dtype=np.int64)
    for a in range(-radius, radius + 1):
        rows = pc + a
        keep = (rows >= 0) & (rows < lo_c.size)
        np.minimum.at(lo_c, rows[keep], qc[keep] - radius)
        np.maximum.at(hi_c, rows[keep], qc[keep] + radius)
    lo = np.empty(p_len, dtype=np.int64)
    hi = np.empty(p_len, dtype=np.int64)
    fine = np.minimum(np.arange(p_len) // 2, lo_c.size - 1)
    lo[:] = 2 * lo_c[fine]
    hi[:] = 2 * hi_c[fine] + 1
    unset = hi_c[fine] < 0
    lo[unset] = q_len
    hi[unset] = -1
    # rows past the coarse grid (odd lengths) reuse the neighbour band
    np.minimum.accumulate(lo[::-1], out=lo[::-1])
    np.maximum.accumulate(hi, out=hi)
    lo = np.clip(lo, 0, q_len - 1)
    hi = np.clip(hi, 0, q_len - 1)
    lo[0] = 0
    hi[-1] = q_len - 1
    return lo, hi


def _fastdtw(t: np.ndarray, r: np.ndarray, radius: int):
    min_size = radius + 2
    if t.size < min_size or r.size < min_size:
        return _dtw_band(t, r, *_full_band(t.size, r.size))
    coarse, _ = _fastdtw(_reduce_by_half(t), _reduce_by_half(r), radius)
    lo, hi = _expand_band(coarse, t.size, r.size, radius)
    return _dtw_band(t, r, lo, hi)


def _znorm(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def dtw(target, reference, radius: int | None = None, *, normalize: bool = False,
        max_cells: int = MAX_EXACT_CELLS) -> tuple[WarpPath, float]:
    """Minimum-cost warp path of ``target`` onto ``reference`` and its cost.

    ``radius=None`` is exact DTW; an integer radius runs the banded
    multi-resolution approximation.  Exact DTW on more than ``max_cells``
    cells falls back to the approximation with radius 16.
    """
    t = check_samples(target, name="target")
    r = check_samples(reference, name="reference")
    if normalize:
        t, r = _znorm(t), _znorm(r)
    if radius is None and t.size * r.size > max_cells:
        warnings.warn(f"{t.size}x{r.size} cost matrix exceeds {max_cells} cells; using radius 16",
                      RuntimeWarning, stacklevel=2)
        radius = 16
    if radius is None:
        path, cost = _dtw_band(t, r, *_full_band(t.size, r.size))
    else:
        if radius < 0:
            raise ValueError("radius must be non-negative")
        path, cost = _fastdtw(t, r, int(radius))
    return WarpPath(path), float(cost)


def elastic_align(target, reference, path: WarpPath) -> np.ndarray:
    """Map ``target`` onto the reference time axis along ``path``: average when
    several target samples land on one reference step, repeat when one target
    sample covers several steps."""
    t = check_samples(target, name="target")
    q_len = reference if isinstance(reference, (int, np.integer)) else np.asarray(reference).size
    path.validate(t.size, q_len)
    p, q = path.pairs[:, 0], path.pairs[:, 1]
    sums = np.bincount(q, weights=t[p], minlength=q_len)
    counts = np.bincount(q, minlength=q_len)
    return sums / counts


def _reference_vector(samples, reference) -> np.ndarray:
    if isinstance(reference, str):
        if reference != "mean":
            raise ValueError(f"unknown reference {reference!r}")
        rows = list(samples)
        if len({len(s) for s in rows}) != 1:
            raise ValueError("mean reference needs uniform lengths")
        return np.mean(np.asarray(rows, dtype=np.float64), axis=0)
    idx = int(reference)
    if not 0 <= idx < len(samples):
        raise ValueError(f"reference index {idx} out of range")
    return np.asarray(samples[idx], dtype=np.float64)


def align_rows(samples, ref: np.ndarray, radius=None, normalize=False,
               max_cells=MAX_EXACT_CELLS, n_jobs=None) -> np.ndarray:
    def one(x):
        x = np.asarray(x, dtype=np.float64)
        path, _ = dtw(x, ref, radius, normalize=normalize, max_cells=max_cells)
        return elastic_align(x, ref.size, path)

    return np.stack(pmap(one, list(samples), n_jobs))


def align_set(ts: TraceSet, reference_index=0, radius: int | None = None, *,
              normalize: bool = False, n_jobs: int | None = None) -> TraceSet:
    """Elastic-align every trace to one shared reference (index or ``"mean"``)."""
    ref = _reference_vector(ts.samples, reference_index)
    out = align_rows(ts.samples, ref, radius, normalize, n_jobs=n_jobs)
    return ts.replace(samples=out.astype(np.float32), components=None, batch_size=ts.batch_size)


class ElasticAligner(TransformerMixin, BaseEstimator):
    """Elastic alignment to a reference learned in ``fit``.

    ``reference`` is a trace index into the fitted data or ``"mean"``.
    ``transform`` accepts a 2-D array or a list of variable-length traces.
    """

    def __init__(self, reference=0, radius=None, normalize=False, max_cells=MAX_EXACT_CELLS, n_jobs=None):
        self.reference = reference
        self.radius = radius
        self.normalize = normalize
        self.max_cells = max_cells
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        rows = list(X)
        if not rows:
            raise ValueError("no traces to fit")
        self.reference_ = _reference_vector(rows, self.reference)
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        return align_rows(list(X), self.reference_, self.radius, self.normalize, self.max_cells, self.n_jobs)
