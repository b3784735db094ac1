"""Countermeasure metrics: analytic and empirical SNR, the misalignment
correlation predictor, Welch's t-test and fixed-vs-random TVLA."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _rng
from ._validation import check_block, check_traces
from .aes import model_power
from .synth import PulseModel, SynthPlan, delay_factor, draw_supply_voltages, resample, scaled_length
from .traces import BATCH_PROVENANCE, IslandConfig, TraceSet

TVLA_THRESHOLD = 4.5


# --------------------------------------------------------------------------
# SNR


@dataclass(frozen=True)
class SnrParams:
    """Island moments shared by all islands: trace T and scaled supply v**alpha."""

    n: int
    m: int
    sigma2_T: float
    mu_T: float
    sigma2_va: float
    mu_va: float

    def __post_init__(self):
        if self.n < 1 or not 1 <= self.m <= self.n:
            raise ValueError("need n >= 1 and 1 <= m <= n")
        if self.sigma2_T < 0 or self.sigma2_va < 0:
            raise ValueError("variances must be non-negative")
        if self.mu_va <= 0:
            raise ValueError("mu_va must be positive")

    @property
    def mu2_va(self) -> float:
        return self.mu_va ** 2

    @classmethod
    def from_levels(cls, levels: Sequence[float], alpha: float, *, n: int, m: int | None = None,
                    mu_T: float = 1.0, sigma2_T: float = 1.0) -> "SnrParams":
        """Moments of v**alpha for v uniform over ``levels``."""
        va = np.asarray(levels, dtype=np.float64) ** alpha
        return cls(n, n if m is None else m, sigma2_T, mu_T, float(va.var()), float(va.mean()))


def _island_var(s2v, mv, s2t, mt):
    # Var(v T) for independent v, T
    return s2v * s2t + s2v * mt * mt + mv * mv * s2t


class SnrTriple(NamedTuple):
    snr_m_eq_n: float
    snr_m_eq_2: float
    snr_m_eq_1: float


def _ratio(num, den):
    # a zero denominator forces a zero numerator: nothing varies at all
    return float("nan") if den == 0 else num / den


def snr_analytic(p: SnrParams) -> SnrTriple:
    """Closed-form SNR for m = n, m = 2 (two halves) and m = 1 supplies."""
    n = p.n
    if n < 2:
        raise ValueError("analytic SNR needs n >= 2")
    if n % 2:
        raise ValueError("the m=2 split needs an even island count")
    num = _island_var(p.sigma2_va, p.mu_va, p.sigma2_T, p.mu_T)
    shared = (n - 1) * (p.mu2_va * p.sigma2_T + p.sigma2_va * p.sigma2_T)
    base = p.sigma2_va * p.mu_T ** 2
    h = n // 2
    d_n = (n - 1) * base + shared
    d_2 = ((h - 1) ** 2 + h ** 2) * base + shared
    d_1 = (n - 1) ** 2 * base + shared
    return SnrTriple(*(_ratio(num, d) for d in (d_n, d_2, d_1)))


def snr_general(moments: Sequence[Sequence[float]]) -> float:
    """SNR with island 0 attacked and every island independent.

    ``moments`` holds ``(sigma2_va, mu_va, sigma2_T, mu_T)`` per island.
    Returns ``inf`` when there is no noise island or the noise has zero variance.
    """
    if not moments:
        raise ValueError("need at least one island")
    signal = _island_var(*moments[0])
    noise = sum(_island_var(*m) for m in moments[1:])
    return float("inf") if noise == 0 else signal / noise


def _peak_index(signal: np.ndarray) -> int:
    return int(np.argmax(np.asarray(signal, dtype=np.float64).mean(axis=0)))


def snr_empirical(ts: TraceSet | None = None, signal_island_samples=None, noise_samples=None) -> float:
    """Across-trace variance of the attacked island over that of everything
    else, at the sample where the mean signal contribution peaks."""
    if signal_island_samples is None or noise_samples is None:
        if ts is None or ts.components is None:
            raise ValueError("decomposition unavailable: synthesize with keep_components=True")
        signal_island_samples = ts.components["signal"]
        noise_samples = ts.components["noise"]
    sig = np.asarray(signal_island_samples, dtype=np.float64)
    noise = np.asarray(noise_samples, dtype=np.float64)
    idx = _peak_index(sig)
    vn = noise[:, idx].var()
    vs = sig[:, idx].var()
    return float("inf") if vn == 0 else float(vs / vn)


class CovarianceCheck(NamedTuple):
    var_sum: float
    var_parts: float
    cov_term: float


def covariance_decomposition_check(ts: TraceSet, index: int | None = None) -> CovarianceCheck:
    """Var(A+B), Var(A)+Var(B) and Cov(A,B) for the two islands of ``ts``."""
    if ts.island_config.n_islands != 2:
        raise ValueError(f"wrong island count: need 2, got {ts.island_config.n_islands}")
    if ts.components is None:
        raise ValueError("decomposition unavailable: synthesize with keep_components=True")
    a_all = ts.components["signal"].astype(np.float64)
    b_all = ts.components["noise"].astype(np.float64)
    idx = _peak_index(a_all) if index is None else int(index)
    a, b = a_all[:, idx], b_all[:, idx]
    ac, bc = a - a.mean(), b - b.mean()
    cov = float(ac @ bc / a.size)
    return CovarianceCheck(float((a + b).var()), float(a.var() + b.var()), cov)


# --------------------------------------------------------------------------
# misalignment


@dataclass(frozen=True)
class MisalignmentParams:
    rho_ap: float
    p: float
    var_secret: float
    var_total: float

    def __post_init__(self):
        if not -1 <= self.rho_ap <= 1:
            raise ValueError("rho_ap must be in [-1, 1]")
        if not 0 <= self.p <= 1:
            raise ValueError("p must be a probability")
        if self.var_total < 0 or self.var_secret < 0:
            raise ValueError("variances must be non-negative")
        if self.var_total == 0:
            raise ValueError("var_total must be positive")
        if self.var_secret > self.var_total:
            raise ValueError("var_secret cannot exceed var_total")


def predict_misaligned_rho(mp: MisalignmentParams) -> float:
    """Correlation left after misalignment: aligned correlation times the
    probability the secret operation is active, times the signal share of
    the standard deviation."""
    return mp.rho_ap * mp.p * float(np.sqrt(mp.var_secret / mp.var_total))


def predicted_rho(rho_ap: float, snr: float) -> float:
    """Correlation after additive noise at a given SNR."""
    if snr == float("inf"):
        return rho_ap
    if snr <= 0:
        return 0.0
    return rho_ap / float(np.sqrt(1.0 + 1.0 / snr))


# --------------------------------------------------------------------------
# t-test and TVLA


def welch_t(group_a, group_b) -> np.ndarray:
    """Per-sample Welch t statistic of ``group_a`` versus ``group_b``."""
    a = check_traces(group_a, min_traces=2, name="group_a traces")
    b = check_traces(group_b, min_traces=2, name="group_b traces")
    if a.shape[1] != b.shape[1]:
        raise ValueError("groups must have the same sample count")
    ma, mb = a.mean(axis=0), b.mean(axis=0)
    se2 = a.var(axis=0, ddof=1) / a.shape[0] + b.var(axis=0, ddof=1) / b.shape[0]
    diff = ma - mb
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
    # zero variance in both groups: identical means give 0, distinct ones +-inf
    flat = se2 == 0
    t[flat & (diff == 0)] = 0.0
    t[flat & (diff > 0)] = np.inf
    t[flat & (diff < 0)] = -np.inf
    return t


@dataclass
class TvlaReport:
    t_scores_group1: np.ndarray
    t_scores_group2: np.ndarray
    threshold: float
    fail_sample_count: int
    n_samples: int
    group_sizes: tuple[int, int, int, int] = (0, 0, 0, 0)

    @property
    def verdict(self) -> str:
        return "fail" if self.fail_sample_count > 0 else "pass"

    def count_exceeding(self, threshold: float) -> int:
        return exceedance_count(self.t_scores_group1, self.t_scores_group2, threshold)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "fail_sample_count": self.fail_sample_count,
            "verdict": self.verdict,
            "n_samples": self.n_samples,
            "group_sizes": list(self.group_sizes),
            "t_scores_group1": [_finite(x) for x in self.t_scores_group1],
            "t_scores_group2": [_finite(x) for x in self.t_scores_group2],
        }


def _finite(x: float):
    x = float(x)
    if np.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf"


def exceedance_count(t1, t2, threshold: float) -> int:
    """Samples where |t| exceeds the threshold in both groups."""
    return int(np.count_nonzero((np.abs(t1) > threshold) & (np.abs(t2) > threshold)))


def _rows(ts) -> list[np.ndarray]:
    if isinstance(ts, TraceSet):
        return [np.asarray(r, dtype=np.float64) for r in ts.samples]
    return [np.asarray(r, dtype=np.float64) for r in ts]


def _trace_digest(row: np.ndarray, extra: bytes = b"") -> bytes:
    return hashlib.sha256(row.astype("<f4").tobytes() + extra).digest()


def _split_halves(rows: list[np.ndarray], extras: list[bytes], seed: int, purpose: str):
    """Seeded half/half split that does not depend on the input order."""
    order = sorted(range(len(rows)), key=lambda i: _trace_digest(rows[i], extras[i]))
    perm = _rng.stream(seed, purpose).permutation(len(order))
    shuffled = [order[i] for i in perm]
    half = len(shuffled) // 2
    return shuffled[:half], shuffled[half:]


def tvla_fixed_vs_random(fixed, random, threshold: float = TVLA_THRESHOLD, seed: int = 0) -> TvlaReport:
    """Non-specific fixed-vs-random TVLA on possibly ragged traces.

    Every trace is linearly interpolated to the median length of all traces,
    each class is split into two seeded halves, and a sample fails when
    ``|t| > threshold`` in both half-comparisons.
    """
    f_rows, r_rows = _rows(fixed), _rows(random)
    if len(f_rows) < 4 or len(r_rows) < 4:
        raise ValueError("TVLA needs at least 4 traces per class")
    lengths = [r.size for r in f_rows + r_rows]
    target = int(np.floor(np.median(lengths) + 0.5))
    f_mat = np.stack([resample(r, target) for r in f_rows])
    r_mat = np.stack([resample(r, target) for r in r_rows])

    def extras(ts, n):
        if isinstance(ts, TraceSet):
            return [ts.plaintexts[i].tobytes() + ts.island_voltages[i].tobytes() for i in range(n)]
        return [b""] * n

    f1, f2 = _split_halves(list(f_mat), extras(fixed, len(f_rows)), seed, "tvla/fixed")
    r1, r2 = _split_halves(list(r_mat), extras(random, len(r_rows)), seed, "tvla/random")
    t1 = welch_t(f_mat[f1], r_mat[r1])
    t2 = welch_t(f_mat[f2], r_mat[r2])
    return TvlaReport(t1, t2, float(threshold), exceedance_count(t1, t2, threshold), target,
                      (len(f1), len(r1), len(f2), len(r2)))


# --------------------------------------------------------------------------
# batch traces for TVLA

TVLA_PULSE = PulseModel(pulse_width=160, padding=0)


def pipeline_batch_trace(powers: np.ndarray, island_volts: np.ndarray, cfg: IslandConfig,
                         pulse: PulseModel, time_scaling: bool = True) -> np.ndarray:
    """One batch of back-to-back encryptions through an n-stage pipeline.

    Island ``i`` is pipeline stage ``i``: during slot ``s`` it processes
    encryption ``s - i``.  Each island's stream is stretched and scaled for
    its own voltage, then all islands are summed (right-padded with baseline).
    """
    n = cfg.n_islands
    n_enc = len(powers)
    slots = n_enc + n - 1
    shape = pulse.shape()
    pad = np.zeros(pulse.padding)
    parts = []
    for i in range(n):
        amp = np.zeros(slots)
        amp[i:i + n_enc] = powers
        stream = np.concatenate([pad, np.outer(amp, shape).ravel(), pad])
        v = float(island_volts[i])
        if time_scaling:
            stream = resample(stream, scaled_length(stream.size, delay_factor(v, cfg)))
        parts.append(stream * v ** cfg.alpha)
    out = np.full(max(p.size for p in parts), 0.0)
    for i, p in enumerate(parts):
        out[:p.size] += p
    return out + pulse.baseline * n


def make_tvla_batches(plan: SynthPlan, fixed_plaintext, n_batches: int | None = None,
                      batch_size: int = 32, position: int | None = None) -> tuple[TraceSet, TraceSet]:
    """Fixed and random TVLA batch captures.

    Each trace holds ``batch_size`` encryptions with the plaintext of interest
    at ``position`` (default: the middle) and random plaintexts elsewhere.
    Supply voltages are redrawn for every batch.  ``plan.pulse.noise_sigma``
    is additive measurement noise on the summed trace.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_batches = plan.n_traces if n_batches is None else int(n_batches)
    position = batch_size // 2 if position is None else int(position)
    if not 0 <= position < batch_size:
        raise ValueError("position outside the batch")
    fixed_pt = np.frombuffer(check_block(fixed_plaintext, name="fixed_plaintext"), np.uint8)
    cfg = plan.island_config
    key = plan.signal_key
    pulse = plan.pulse
    out = []
    for cls in ("fixed", "random"):
        supply = draw_supply_voltages(plan, n_batches, purpose=f"tvla-{cls}/voltages")
        volts = cfg.island_voltages(supply)
        rows, interest = [], []
        for b, start, stop in _rng.blocks(n_batches, 256):
            g_pt = _rng.stream(plan.rng_seed, f"tvla-{cls}/plaintexts", b)
            g_noise = _rng.stream(plan.rng_seed, f"tvla-{cls}/noise", b)
            for j in range(start, stop):
                pts = g_pt.integers(0, 256, size=(batch_size, 16), dtype=np.uint8)
                if cls == "fixed":
                    pts[position] = fixed_pt
                row = pipeline_batch_trace(model_power(pts, key).astype(np.float64), volts[j], cfg,
                                           pulse, plan.time_scaling)
                if pulse.noise_sigma > 0:
                    row = row + g_noise.normal(0.0, pulse.noise_sigma, size=row.size)
                rows.append(row.astype(np.float32))
                interest.append(pts[position])
        out.append(TraceSet(
            samples=rows, plaintexts=np.stack(interest), keys=np.frombuffer(key, np.uint8),
            island_voltages=volts, island_config=cfg, batch_size=batch_size,
            provenance=BATCH_PROVENANCE,
        ))
    return out[0], out[1]
