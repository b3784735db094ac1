"""Clustering-assisted CPA.

Traces are grouped by K-means on their raw samples so that each cluster
ideally holds one combination of supply voltages; CPA runs per cluster and
the per-cluster subkey ranks are averaged into one fused ranking.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from . import _rng
from ._validation import check_block, check_plaintexts, check_positive_int, check_traces
from .cpa import (
    AttackResult,
    MtdReport,
    _attack_arrays,
    _key_bytes,
    avg_pge,
    check_schedule,
    mtd_from_pges,
    rank_guesses,
)
from .synth import roi_start
from .traces import TraceSet

log = logging.getLogger(__name__)

_DIST_CHUNK = 16384


def ideal_k(m: int, g: int) -> int:
    """Number of size-m multisets over g voltage levels, C(m+g-1, m)."""
    m = check_positive_int(m, "m")
    g = check_positive_int(g, "g")
    return math.comb(m + g - 1, m)


def enumerate_voltage_multisets(m: int, g: int) -> list[tuple[int, ...]]:
    return list(combinations_with_replacement(range(g), m))


def _sq_norms(X):
    return np.einsum("ij,ij->i", X, X)


def _assign(X, x_sq, centers):
    """Nearest-centre labels and squared distances, computed chunkwise."""
    c_sq = _sq_norms(centers)
    labels = np.empty(X.shape[0], dtype=np.intp)
    for start in range(0, X.shape[0], _DIST_CHUNK):
        stop = start + _DIST_CHUNK
        d = x_sq[start:stop, None] - 2.0 * (X[start:stop] @ centers.T) + c_sq[None, :]
        labels[start:stop] = np.argmin(d, axis=1)
    diff = X - centers[labels]
    return labels, _sq_norms(diff)


def _kmeans_pp(X, x_sq, k, g):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = int(g.integers(n))
    centers[0] = X[first]
    closest = _sq_norms(X - X[first])
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all points coincide with chosen centres
            idx = int(g.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), g.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        np.minimum(closest, _sq_norms(X - X[idx]), out=closest)
    return centers


class TraceKMeans(ClusterMixin, BaseEstimator):
    """Lloyd's K-means with seeded k-means++ initialisation.

    Attributes after ``fit``: ``cluster_centers_``, ``labels_``, ``inertia_``,
    ``inertia_history_`` (inertia after every assignment step) and
    ``n_iter_``.  An empty cluster is re-seeded at the point farthest from its
    current centre.
    """

    def __init__(self, n_clusters=8, seed=0, max_iter=100, tol=1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_traces(X)
        n = X.shape[0]
        k = int(self.n_clusters)
        if k < 1:
            raise ValueError("n_clusters must be >= 1")
        if k > n:
            raise ValueError(f"n_clusters={k} exceeds the {n} traces")
        g = _rng.stream(self.seed, "kmeans")
        x_sq = _sq_norms(X)
        scale = float(np.mean(X.var(axis=0))) or 1.0
        if k == n:
            centers = X.copy()
        else:
            centers = _kmeans_pp(X, x_sq, k, g)
        history = []
        labels = None
        n_iter = 0
        for n_iter in range(1, int(self.max_iter) + 1):
            new_labels, d2 = _assign(X, x_sq, centers)
            history.append(float(d2.sum()))
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            counts = np.bincount(labels, minlength=k)
            sums = np.zeros_like(centers)
            np.add.at(sums, labels, X)
            new_centers = centers.copy()
            nonempty = counts > 0
            new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
            if not nonempty.all():
                far = np.argsort(-d2, kind="stable")
                for c, idx in zip(np.flatnonzero(~nonempty), far):
                    new_centers[c] = X[idx]
            shift = float(((new_centers - centers) ** 2).sum())
            centers = new_centers
            if shift <= self.tol * scale:
                labels, d2 = _assign(X, x_sq, centers)
                history.append(float(d2.sum()))
                break
        self.cluster_centers_ = centers
        self.labels_ = labels
        d2 = _sq_norms(X - centers[self.labels_])
        self.inertia_ = float(d2.sum())
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_traces(X)
        return _assign(X, _sq_norms(X), self.cluster_centers_)[0]


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    seed: int
    inertia_history: list[float] = field(default_factory=list)
    roi_start: int = 0

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def cluster_features(ts_or_X, roi_window: int | None = None, remove_mean: bool = False):
    """Features used for clustering: raw samples, optionally cropped to the ROI."""
    X = ts_or_X.matrix() if isinstance(ts_or_X, TraceSet) else check_traces(ts_or_X)
    start = 0
    if roi_window is not None and roi_window < X.shape[1]:
        start = roi_start(X, roi_window)
        X = X[:, start:start + roi_window]
    if remove_mean:
        X = X - X.mean(axis=1, keepdims=True)
    return X, start


def kmeans(ts: TraceSet, k: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6, *,
           roi_window: int | None = None, remove_mean: bool = False) -> ClusterModel:
    if k < 1:
        raise ValueError("k must be >= 1")
    if ts.is_ragged:
        raise ValueError("kmeans needs uniform trace lengths")
    X, start = cluster_features(ts, roi_window, remove_mean)
    est = TraceKMeans(n_clusters=k, seed=seed, max_iter=max_iters, tol=tol).fit(X)
    return ClusterModel(k, est.cluster_centers_, est.labels_, est.inertia_, seed,
                        est.inertia_history_, start)


@dataclass
class FusedAttackResult:
    byte_index: int
    per_cluster: list[AttackResult]
    fused_ranking: np.ndarray
    average_rank: np.ndarray
    fused_pge: int | None = None
    mtd: MtdReport | None = None

    def to_dict(self) -> dict:
        return {
            "byte_index": self.byte_index,
            "fused_ranking": self.fused_ranking.tolist(),
            "average_rank": self.average_rank.tolist(),
            "fused_pge": self.fused_pge,
            "clusters": [r.n_traces for r in self.per_cluster],
        }


def fuse_rankings(rankings) -> tuple[np.ndarray, np.ndarray]:
    """Average 0-based ranks across clusters; ascending average, ties to lower guess."""
    rankings = np.atleast_2d(np.asarray(rankings))
    ranks = np.empty_like(rankings, dtype=np.float64)
    rows = np.arange(rankings.shape[0])[:, None]
    ranks[rows, rankings] = np.arange(256)[None, :]
    avg = ranks.mean(axis=0)
    return rank_guesses(-avg), avg


def _clustered_attack(X, pts, labels, k, byte_indices, model, key, signed, n_jobs):
    members = [np.flatnonzero(labels == c) for c in range(k)]
    usable = [m for m in members if m.size >= 2]
    skipped = sum(1 for m in members if m.size < 2)
    if skipped:
        warnings.warn(f"{skipped} cluster(s) with fewer than 2 traces excluded from fusion",
                      RuntimeWarning, stacklevel=3)
    if not usable:
        raise ValueError("all clusters are degenerate (fewer than 2 traces each)")
    per_cluster = [
        _attack_arrays(X[m], pts[m], byte_indices, model, key, signed, n_jobs=n_jobs)[m.size]
        for m in usable
    ]
    fused = []
    for pos, b in enumerate(byte_indices):
        results = [pc[pos] for pc in per_cluster]
        ranking, avg = fuse_rankings([r.ranking for r in results])
        res = FusedAttackResult(b, results, ranking, avg)
        if key is not None:
            res.fused_pge = int(np.flatnonzero(ranking == key[b])[0])
        fused.append(res)
    return fused


def cluster_attack(ts: TraceSet, k: int, model="hw", known_key=None, seed: int = 0, *,
                   byte_indices=None, schedule=None, roi_window: int | None = None,
                   remove_mean: bool = False, signed: bool = False, max_iters: int = 100,
                   n_jobs: int | None = None) -> list[FusedAttackResult]:
    """Cluster, attack each cluster, fuse ranks; one result per attacked byte.

    With ``schedule`` the whole procedure is repeated on each trace prefix and
    every result carries the resulting MtdReport (all 16 bytes required).
    """
    if ts.is_ragged:
        raise ValueError("cluster attack needs uniform trace lengths")
    key = _key_bytes(known_key, ts if known_key is None else None)
    bytes_ = list(range(16)) if byte_indices is None else list(byte_indices)
    X = ts.samples
    pts = ts.plaintexts
    feats, _ = cluster_features(ts, roi_window, remove_mean)

    def run(count):
        est = TraceKMeans(n_clusters=k, seed=seed, max_iter=max_iters).fit(feats[:count])
        return _clustered_attack(X[:count], pts[:count], est.labels_, k, bytes_, model,
                                 key, signed, n_jobs)

    if schedule is None:
        return run(len(ts))
    if key is None:
        raise ValueError("MTD needs the known key")
    if len(bytes_) != 16:
        raise ValueError("MTD needs all 16 bytes")
    schedule = check_schedule(schedule, len(ts))
    per_count = {}
    final = None
    for count in schedule:
        final = run(count)
        per_count[count] = [r.fused_pge for r in final]
        log.debug("k=%d count=%d fused pge=%s", k, count, per_count[count])
    report = mtd_from_pges(schedule, per_count)
    for r in final:
        r.mtd = report
    return final


@dataclass
class SweepRow:
    k: int
    mtd: MtdReport
    avg_pge: float

    def to_dict(self) -> dict:
        return {"k": self.k, "mtd": self.mtd.disclosed_at, "mtd_label": self.mtd.label,
                "avg_pge": self.avg_pge, "report": self.mtd.to_dict()}


def sweep_k(ts: TraceSet, k_values, model="hw", known_key=None, seed: int = 0, *,
            schedule=None, roi_window: int | None = None, remove_mean: bool = False,
            n_jobs: int | None = None) -> dict[int, SweepRow]:
    """Clustering attack for every K; MTD over ``schedule`` and final average PGE."""
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise ValueError("k_values is empty")
    schedule = check_schedule(schedule, len(ts))
    out = {}
    for k in k_values:
        res = cluster_attack(ts, k, model, known_key, seed, schedule=schedule,
                             roi_window=roi_window, remove_mean=remove_mean, n_jobs=n_jobs)
        out[k] = SweepRow(k, res[0].mtd, avg_pge([r.fused_pge for r in res]))
        log.info("k=%d mtd=%s avg_pge=%.2f", k, out[k].mtd.label, out[k].avg_pge)
    return out


class ClusterCPA(BaseEstimator):
    """``fit(traces, plaintexts)``: K-means, per-cluster CPA and rank fusion."""

    def __init__(self, n_clusters=5, model="hw", seed=0, byte_indices=None, max_iter=100,
                 signed=False, n_jobs=None):
        self.n_clusters = n_clusters
        self.model = model
        self.seed = seed
        self.byte_indices = byte_indices
        self.max_iter = max_iter
        self.signed = signed
        self.n_jobs = n_jobs

    def fit(self, X, plaintexts, key=None):
        X = check_traces(X, min_traces=2)
        pts = check_plaintexts(plaintexts, X.shape[0])
        k = None if key is None else np.frombuffer(check_block(key, name="key"), np.uint8)
        bytes_ = list(range(16)) if self.byte_indices is None else list(self.byte_indices)
        self.kmeans_ = TraceKMeans(self.n_clusters, self.seed, self.max_iter).fit(X)
        self.results_ = _clustered_attack(X, pts, self.kmeans_.labels_, self.n_clusters, bytes_,
                                          self.model, k, self.signed, self.n_jobs)
        self.rankings_ = np.stack([r.fused_ranking for r in self.results_])
        self.labels_ = self.kmeans_.labels_
        return self

    def predict(self, X=None):
        check_is_fitted(self, "rankings_")
        return self.rankings_[:, 0].astype(np.uint8)
