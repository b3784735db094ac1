"""Correlation power analysis, partial guessing entropy and traces-to-disclosure."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._parallel import pmap
from ._validation import check_block, check_byte_index, check_plaintexts, check_traces
from .aes import LeakageModel, leakage_table
from .traces import TraceSet

DEFAULT_MTD_SCHEDULE = (1_000, 2_000, 5_000, 10_000, 16_000, 20_000, 50_000, 100_000, 200_000)
CHUNK = 8192


def pearson(x, y) -> float:
    """Sample Pearson correlation; 0.0 when either input has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-D vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if sxx == 0 or syy == 0:
        return 0.0
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


class CorrelationAccumulator:
    """Single-pass sums for Pearson correlation of every (byte, guess) hypothesis
    column against every sample column.

    Sums are taken about the first observation, which keeps the raw-moment
    formulas well conditioned and makes constant columns exactly zero-variance.
    """

    def __init__(self, byte_indices: Sequence[int], n_samples: int, model="hw"):
        self.byte_indices = [check_byte_index(b) for b in byte_indices]
        self.model = LeakageModel.coerce(model)
        self.table = leakage_table(self.model).astype(np.float64)
        nb = len(self.byte_indices)
        self.n = 0
        self.n_samples = n_samples
        self._t0 = None
        self._h0 = None
        self.st = np.zeros(n_samples)
        self.stt = np.zeros(n_samples)
        self.sh = np.zeros((nb, 256))
        self.shh = np.zeros((nb, 256))
        self.sht = np.zeros((nb, 256, n_samples))

    def update(self, traces: np.ndarray, plaintexts: np.ndarray, n_jobs: int | None = None):
        traces = np.asarray(traces, dtype=np.float64)
        if traces.shape[0] == 0:
            return self
        if traces.shape[1] != self.n_samples:
            raise ValueError("sample count changed between updates")
        if self._t0 is None:
            self._t0 = traces[0].copy()
            self._h0 = self.table[plaintexts[0, self.byte_indices]]
        tc = traces - self._t0
        self.st += tc.sum(axis=0)
        self.stt += np.einsum("ij,ij->j", tc, tc)

        def one(k):
            h = self.table[plaintexts[:, self.byte_indices[k]]] - self._h0[k]
            return k, h.sum(axis=0), np.einsum("ij,ij->j", h, h), h.T @ tc

        for k, s, ss, cross in pmap(one, range(len(self.byte_indices)), n_jobs):
            self.sh[k] += s
            self.shh[k] += ss
            self.sht[k] += cross
        self.n += traces.shape[0]
        return self

    def correlation(self) -> np.ndarray:
        """(n_bytes, 256, n_samples) correlation coefficients."""
        if self.n < 2:
            raise ValueError("need at least 2 traces")
        n = self.n
        mt = self.st / n
        mh = self.sh / n
        vt = np.maximum(self.stt / n - mt * mt, 0.0)
        vh = np.maximum(self.shh / n - mh * mh, 0.0)
        cov = self.sht / n - mh[:, :, None] * mt[None, None, :]
        denom = np.sqrt(vh[:, :, None] * vt[None, None, :])
        with np.errstate(invalid="ignore", divide="ignore"):
            rho = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(rho, -1.0, 1.0)


def correlation_matrix(traces, plaintexts, byte_index: int, model="hw") -> np.ndarray:
    """(256, n_samples) correlation of each guess against each sample."""
    X = check_traces(traces, min_traces=2)
    pts = check_plaintexts(plaintexts, X.shape[0])
    acc = CorrelationAccumulator([byte_index], X.shape[1], model)
    for start in range(0, X.shape[0], CHUNK):
        acc.update(X[start:start + CHUNK], pts[start:start + CHUNK])
    return acc.correlation()[0]


@dataclass
class AttackResult:
    byte_index: int
    ranking: np.ndarray
    peak_correlation: np.ndarray
    pge: int | None = None
    correlation_trace: np.ndarray | None = None
    n_traces: int = 0

    @property
    def best_guess(self) -> int:
        return int(self.ranking[0])

    def rank_of(self, guess: int) -> int:
        return int(np.flatnonzero(self.ranking == guess)[0])

    def to_dict(self) -> dict:
        return {
            "byte_index": self.byte_index,
            "ranking": self.ranking.tolist(),
            "peak_correlation": self.peak_correlation.tolist(),
            "pge": self.pge,
            "n_traces": self.n_traces,
        }


def rank_guesses(peaks: np.ndarray) -> np.ndarray:
    """Guesses by descending score; ties go to the lower guess value."""
    return np.argsort(-np.asarray(peaks, dtype=np.float64), kind="stable")


def result_from_correlation(rho: np.ndarray, byte_index: int, true_byte: int | None = None,
                            signed: bool = False, n_traces: int = 0,
                            keep_trace: bool = False) -> AttackResult:
    score = rho if signed else np.abs(rho)
    peaks = score.max(axis=1)
    ranking = rank_guesses(peaks)
    res = AttackResult(byte_index, ranking, peaks, n_traces=n_traces)
    if true_byte is not None:
        res.pge = res.rank_of(true_byte)
    if keep_trace:
        res.correlation_trace = rho[ranking[0]].copy()
    return res


def _key_bytes(known_key, ts: TraceSet | None = None) -> np.ndarray | None:
    if known_key is None:
        if ts is not None and ts.keys is not None and np.all(ts.keys == ts.keys[0]):
            return ts.keys[0].copy()
        return None
    return np.frombuffer(check_block(known_key, name="key"), np.uint8)


def _attack_arrays(X: np.ndarray, pts: np.ndarray, byte_indices, model, key, signed,
                   schedule=None, n_jobs=None, keep_trace=False):
    """Run CPA on every byte; returns {count: [AttackResult, ...]} over ``schedule``."""
    schedule = [X.shape[0]] if schedule is None else list(schedule)
    acc = CorrelationAccumulator(byte_indices, X.shape[1], model)
    out = {}
    done = 0
    for count in schedule:
        for start in range(done, count, CHUNK):
            stop = min(count, start + CHUNK)
            acc.update(X[start:stop], pts[start:stop], n_jobs)
        done = count
        rho = acc.correlation()
        out[count] = [
            result_from_correlation(rho[k], b, None if key is None else int(key[b]),
                                    signed, count, keep_trace)
            for k, b in enumerate(acc.byte_indices)
        ]
    return out


def cpa_attack(ts: TraceSet, byte_index: int, model="hw", known_key=None, *,
               signed: bool = False, n_jobs: int | None = None) -> AttackResult:
    """Rank the 256 guesses of one subkey byte by peak |correlation| over samples."""
    if ts.is_ragged:
        raise ValueError("CPA needs uniform trace lengths (ragged traces)")
    if len(ts) < 2:
        raise ValueError("CPA needs at least 2 traces")
    key = _key_bytes(known_key, ts if known_key is None else None)
    res = _attack_arrays(ts.samples, ts.plaintexts, [check_byte_index(byte_index)], model, key,
                         signed, n_jobs=n_jobs, keep_trace=True)
    return res[len(ts)][0]


def cpa_attack_all(ts: TraceSet, model="hw", known_key=None, *, signed: bool = False,
                   n_jobs: int | None = None) -> list[AttackResult]:
    if ts.is_ragged:
        raise ValueError("CPA needs uniform trace lengths (ragged traces)")
    if len(ts) < 2:
        raise ValueError("CPA needs at least 2 traces")
    key = _key_bytes(known_key, ts if known_key is None else None)
    return _attack_arrays(ts.samples, ts.plaintexts, range(16), model, key, signed,
                          n_jobs=n_jobs)[len(ts)]


@dataclass
class MtdReport:
    schedule: list[int]
    disclosed_at: int | None
    per_count_pge: dict[int, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.disclosed_at is not None:
            if self.disclosed_at not in self.schedule:
                raise ValueError("disclosed_at must be a schedule entry")
            if any(p != 0 for p in self.per_count_pge[self.disclosed_at]):
                raise ValueError("disclosure requires every PGE to be 0")

    @property
    def label(self) -> str:
        if self.disclosed_at is not None:
            return str(self.disclosed_at)
        return f">{self.schedule[-1]}"

    def to_dict(self) -> dict:
        return {
            "schedule": list(self.schedule),
            "disclosed_at": self.disclosed_at,
            "label": self.label,
            "per_count_pge": {str(c): list(map(int, p)) for c, p in self.per_count_pge.items()},
        }


def default_schedule(n_available: int) -> list[int]:
    sched = [c for c in DEFAULT_MTD_SCHEDULE if c <= n_available]
    if not sched or sched[-1] != n_available and n_available < DEFAULT_MTD_SCHEDULE[-1]:
        sched.append(n_available)
    return sched


def check_schedule(schedule, n_available: int) -> list[int]:
    if schedule is None:
        return default_schedule(n_available)
    schedule = [int(c) for c in schedule]
    if not schedule:
        raise ValueError("empty schedule")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing")
    if schedule[0] < 2 or schedule[-1] > n_available:
        raise ValueError(f"schedule must lie within [2, {n_available}]")
    return schedule


def mtd_from_pges(schedule: list[int], per_count: dict[int, list[int]]) -> MtdReport:
    disclosed = next((c for c in schedule if all(p == 0 for p in per_count[c])), None)
    return MtdReport(list(schedule), disclosed, per_count)


def compute_mtd(ts: TraceSet, model="hw", known_key=None, schedule=None, *,
                signed: bool = False, n_jobs: int | None = None) -> MtdReport:
    """CPA on growing trace prefixes; disclosure is the first count with every
    byte at PGE 0.  Counts are trace rows, repeated plaintexts included."""
    key = _key_bytes(known_key, ts if known_key is None else None)
    if key is None:
        raise ValueError("MTD needs the known key")
    if ts.is_ragged:
        raise ValueError("CPA needs uniform trace lengths (ragged traces)")
    schedule = check_schedule(schedule, len(ts))
    res = _attack_arrays(ts.samples, ts.plaintexts, range(16), model, key, signed, schedule, n_jobs)
    per_count = {c: [r.pge for r in res[c]] for c in schedule}
    return mtd_from_pges(schedule, per_count)


def avg_pge(obj) -> float:
    """Mean PGE over the 16 key bytes (last schedule entry for an MtdReport)."""
    if isinstance(obj, MtdReport):
        pges = obj.per_count_pge[obj.schedule[-1]]
    elif isinstance(obj, AttackResult):
        raise ValueError("avg_pge requires 16 bytes, got a single-byte result")
    else:
        pges = [o.pge if isinstance(o, AttackResult) else o for o in obj]
    if len(pges) != 16:
        raise ValueError(f"avg_pge requires 16 bytes, got {len(pges)}")
    if any(p is None for p in pges):
        raise ValueError("PGE needs a known key")
    return float(np.mean(pges))


class CPA(BaseEstimator):
    """Estimator wrapper: ``fit(traces, plaintexts)`` ranks every subkey byte.

    Parameters
    ----------
    model : {"hw", "hd"}
    byte_indices : sequence of int, optional
        Bytes to attack; all 16 by default.
    signed : bool
        Rank by signed rather than absolute correlation.
    """

    def __init__(self, model="hw", byte_indices=None, signed=False, n_jobs=None):
        self.model = model
        self.byte_indices = byte_indices
        self.signed = signed
        self.n_jobs = n_jobs

    def fit(self, X, plaintexts, key=None):
        X = check_traces(X, min_traces=2)
        pts = check_plaintexts(plaintexts, X.shape[0])
        bytes_ = list(range(16)) if self.byte_indices is None else list(self.byte_indices)
        k = None if key is None else np.frombuffer(check_block(key, name="key"), np.uint8)
        self.results_ = _attack_arrays(X, pts, bytes_, self.model, k, self.signed,
                                       n_jobs=self.n_jobs, keep_trace=True)[X.shape[0]]
        self.rankings_ = np.stack([r.ranking for r in self.results_])
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X=None):
        """Best guess per attacked byte."""
        check_is_fitted(self, "rankings_")
        return self.rankings_[:, 0].astype(np.uint8)

    def pge(self, key) -> np.ndarray:
        check_is_fitted(self, "rankings_")
        k = np.frombuffer(check_block(key, name="key"), np.uint8)
        return np.array([r.rank_of(int(k[r.byte_index])) for r in self.results_])
