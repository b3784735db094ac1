"""Synthetic iRDVS power traces.

Base traces come from the first-round S-box model: one pulse per encryption
whose peak is the summed Hamming weight of the 16 S-box outputs.  Each island
trace is stretched in time by the ratio of gate delays at its supply voltage
to the delay at the fastest level, scaled in amplitude by ``v**alpha``, and
the islands are summed sample-wise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _rng
from ._validation import check_block, check_samples, check_traces
from .aes import model_power
from .traces import IslandConfig, Trace, TraceSet


# standard deviation of the summed S-box Hamming weight over random plaintexts
PULSE_SCALE = math.sqrt(16 * 2.0)
# measurement noise used by the bundled experiments, in units of PULSE_SCALE
DEFAULT_NOISE_SCALE = 3.0


class PulseShape(str, enum.Enum):
    RECTANGULAR = "rectangular"
    HALF_SINE = "halfsine"


@dataclass(frozen=True)
class PulseModel:
    """One encryption pulse at nominal voltage.

    The base trace is ``padding`` baseline samples, the pulse, and another
    ``padding`` baseline samples.  ``padding`` defaults to half the width.
    """

    pulse_width: int = 32
    pulse_shape: PulseShape = PulseShape.HALF_SINE
    baseline: float = 0.0
    noise_sigma: float = 0.0
    padding: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "pulse_shape", PulseShape(self.pulse_shape))
        if self.pulse_width < 2:
            raise ValueError("pulse_width must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.padding is None:
            object.__setattr__(self, "padding", self.pulse_width // 2)
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def length(self) -> int:
        return self.pulse_width + 2 * self.padding

    def shape(self) -> np.ndarray:
        """Unit-peak pulse envelope."""
        w = self.pulse_width
        if self.pulse_shape is PulseShape.RECTANGULAR:
            return np.ones(w)
        env = np.sin(np.pi * (np.arange(w) + 1) / (w + 1))
        return env / env.max()

    def envelope(self) -> np.ndarray:
        """Unit-peak envelope over the full base-trace length."""
        out = np.zeros(self.length)
        out[self.padding:self.padding + self.pulse_width] = self.shape()
        return out


@dataclass(frozen=True)
class VoltagePolicy:
    """How often supply voltages are redrawn: every trace, or every ``batch_len`` traces."""

    batch_len: int = 1

    def __post_init__(self):
        if self.batch_len < 1:
            raise ValueError("batch_len must be positive")

    @classmethod
    def per_encryption(cls) -> "VoltagePolicy":
        return cls(1)

    @classmethod
    def per_batch(cls, batch_len: int) -> "VoltagePolicy":
        return cls(batch_len)


@dataclass(frozen=True)
class SynthPlan:
    island_config: IslandConfig
    n_traces: int
    rng_seed: int
    signal_key: bytes = bytes(16)
    voltage_policy: VoltagePolicy = field(default_factory=VoltagePolicy)
    pulse: PulseModel = field(default_factory=PulseModel)
    # per-supply subsets of the level set; None draws every supply from all levels
    supply_levels: Sequence[Sequence[float]] | None = None
    # False keeps every island on the nominal time axis (amplitude scaling only)
    time_scaling: bool = True
    keep_components: bool = False

    def __post_init__(self):
        if self.n_traces < 1:
            raise ValueError("n_traces must be >= 1")
        object.__setattr__(self, "signal_key", check_block(self.signal_key, name="signal_key"))
        if self.supply_levels is not None:
            cfg = self.island_config
            subsets = tuple(tuple(float(v) for v in s) for s in self.supply_levels)
            if len(subsets) != cfg.n_supplies:
                raise ValueError("supply_levels needs one entry per supply")
            for s in subsets:
                if not s or any(not np.isclose(v, cfg.voltage_levels).any() for v in s):
                    raise ValueError("supply_levels entries must be non-empty subsets of voltage_levels")
            object.__setattr__(self, "supply_levels", subsets)


# --------------------------------------------------------------------------
# delay and scaling primitives


def sn_delay(v, cfg: IslandConfig):
    """Sakurai-Newton alpha-power gate delay ``C_L/k * v / (v - V_T)**alpha``."""
    v_arr = np.asarray(v, dtype=np.float64)
    if np.any(v_arr <= cfg.v_threshold):
        raise ValueError(f"supply voltage must exceed V_T={cfg.v_threshold}")
    out = cfg.c_load_over_k * v_arr / (v_arr - cfg.v_threshold) ** cfg.alpha
    return float(out) if out.ndim == 0 else out


def delay_factor(v, cfg: IslandConfig):
    """Time-stretch factor relative to the fastest configured level."""
    return sn_delay(v, cfg) / sn_delay(cfg.v_max, cfg)


def scaled_length(length: int, factor: float) -> int:
    return max(1, int(math.floor(length * factor + 0.5)))


def resample(x: np.ndarray, m: int) -> np.ndarray:
    """Endpoint-aligned linear interpolation of the last axis to ``m`` samples."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if m == n:
        return x.copy()
    if n == 1:
        return np.repeat(x, m, axis=-1)
    pos = np.linspace(0.0, n - 1, m) if m > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    w = pos - i0
    return x[..., i0] * (1.0 - w) + x[..., i0 + 1] * w


def time_scale(samples, factor: float) -> np.ndarray:
    """Stretch (factor > 1) or compress a trace to ``round(len * factor)`` samples."""
    if factor <= 0:
        raise ValueError("time-scale factor must be positive")
    x = check_samples(samples)
    return resample(x, scaled_length(x.size, factor))


def amplitude_scale(samples, v: float, alpha: float) -> np.ndarray:
    if v <= 0:
        raise ValueError("voltage must be positive")
    return np.asarray(samples, dtype=np.float64) * (float(v) ** alpha)


# --------------------------------------------------------------------------
# base traces


def base_traces(plaintexts: np.ndarray, key, pulse: PulseModel, rng=None) -> np.ndarray:
    """(n, pulse.length) float64 base traces for an (n, 16) plaintext array."""
    power = model_power(plaintexts, key).astype(np.float64)
    out = pulse.baseline + power[:, None] * pulse.envelope()[None, :]
    if pulse.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        out = out + _rng.as_generator(rng).normal(0.0, pulse.noise_sigma, size=out.shape)
    return out


def generate_base_trace(plaintext, key, pulse: PulseModel, rng=None) -> Trace:
    pt = check_block(plaintext, name="plaintext")
    row = base_traces(np.frombuffer(pt, np.uint8)[None, :], key, pulse, rng)[0]
    return Trace(samples=row, plaintext=pt, key=check_block(key, name="key"))


def generate_base_set(n_traces: int, key, pulse: PulseModel, seed: int,
                      purpose: str = "base") -> TraceSet:
    """Random-plaintext base traces at nominal voltage, drawn blockwise."""
    key = check_block(key, name="key")
    pts, rows = [], []
    for b, start, stop in _rng.blocks(n_traces):
        p = _rng.stream(seed, purpose + "/plaintexts", b).integers(0, 256, size=(stop - start, 16), dtype=np.uint8)
        rows.append(base_traces(p, key, pulse, _rng.stream(seed, purpose + "/noise", b)))
        pts.append(p)
    return TraceSet(
        samples=np.concatenate(rows).astype(np.float32),
        plaintexts=np.concatenate(pts),
        keys=np.frombuffer(key, np.uint8),
        island_config=IslandConfig(),
    )


# --------------------------------------------------------------------------
# iRDVS composition


def draw_supply_voltages(plan: SynthPlan, n_draws: int | None = None,
                         purpose: str = "voltages") -> np.ndarray:
    """(n_traces, m) supply voltages drawn uniformly from each supply's level set."""
    cfg = plan.island_config
    batch_len = plan.voltage_policy.batch_len
    n_traces = plan.n_traces if n_draws is None else n_draws
    n_batches = -(-n_traces // batch_len)
    subsets = plan.supply_levels or [cfg.voltage_levels] * cfg.n_supplies
    out = np.empty((n_batches, cfg.n_supplies))
    for b, start, stop in _rng.blocks(n_batches):
        g = _rng.stream(plan.rng_seed, purpose, b)
        for s, levels in enumerate(subsets):
            out[start:stop, s] = np.asarray(levels)[g.integers(0, len(levels), size=stop - start)]
    return np.repeat(out, batch_len, axis=0)[:n_traces]


def composed_length(length: int, cfg: IslandConfig, time_scaling: bool = True) -> int:
    if not time_scaling:
        return length
    return max(scaled_length(length, delay_factor(v, cfg)) for v in cfg.voltage_levels)


def _render_island(x: np.ndarray, volts: np.ndarray, cfg: IslandConfig, out_len: int,
                   baseline: float, time_scaling: bool) -> np.ndarray:
    """Scale each row of ``x`` for its own voltage, right-padded with baseline."""
    out = np.empty((x.shape[0], out_len))
    for v in np.unique(volts):
        rows = volts == v
        gain = float(v) ** cfg.alpha
        y = x[rows]
        if time_scaling:
            y = resample(y, scaled_length(x.shape[1], delay_factor(float(v), cfg)))
        if gain != 1.0:
            y = y * gain
        out[np.ix_(rows, np.arange(y.shape[1]))] = y
        out[rows, y.shape[1]:] = baseline * gain
    return out


def _compose_block(signal: np.ndarray, noise: np.ndarray, island_volts: np.ndarray,
                   cfg: IslandConfig, out_len: int, baseline: float, time_scaling: bool):
    sig = _render_island(signal, island_volts[:, 0], cfg, out_len, baseline, time_scaling)
    rest = np.zeros_like(sig)
    total = np.zeros_like(sig) + sig
    for i in range(1, cfg.n_islands):
        contrib = _render_island(noise[:, i - 1], island_volts[:, i], cfg, out_len, baseline, time_scaling)
        total += contrib
        rest += contrib
    return total, sig, rest


def compose_irdvs(signal_traces: TraceSet, noise_traces: TraceSet | None, plan: SynthPlan) -> TraceSet:
    """Combine base traces into iRDVS traces.

    Output trace ``j`` puts signal trace ``j mod len(signal)`` on island 0 and
    noise traces ``(j*(n-1) + i) mod len(noise)`` on islands ``1..n-1``; reuse
    happens with freshly drawn voltages.
    """
    cfg = plan.island_config
    n = cfg.n_islands
    if signal_traces.is_ragged:
        raise ValueError("signal traces must have uniform length")
    length = signal_traces.n_samples
    if n > 1:
        if noise_traces is None or len(noise_traces) < n - 1:
            raise ValueError(f"insufficient noise traces: need at least {n - 1}")
        if noise_traces.is_ragged or noise_traces.n_samples != length:
            raise ValueError("noise traces must match the signal trace length")
    for ts in (signal_traces, noise_traces):
        if ts is not None and ts.island_config.n_islands != 1:
            raise ValueError("mismatched island configs: base traces must be single-island")

    supply = draw_supply_voltages(plan)
    island_volts = cfg.island_voltages(supply)
    out_len = composed_length(length, cfg, plan.time_scaling)
    baseline = plan.pulse.baseline
    total = np.empty((plan.n_traces, out_len), dtype=np.float32)
    comps = {"signal": np.empty_like(total), "noise": np.empty_like(total)} if plan.keep_components else None
    sig_all = signal_traces.samples
    noise_all = noise_traces.samples if n > 1 else None
    for _, start, stop in _rng.blocks(plan.n_traces):
        j = np.arange(start, stop)
        sig = sig_all[j % len(sig_all)].astype(np.float64)
        if n > 1:
            idx = (j[:, None] * (n - 1) + np.arange(n - 1)[None, :]) % len(noise_all)
            noise = noise_all[idx].astype(np.float64)
        else:
            noise = np.empty((stop - start, 0, length))
        t, s, r = _compose_block(sig, noise, island_volts[start:stop], cfg, out_len, baseline, plan.time_scaling)
        total[start:stop] = t
        if comps is not None:
            comps["signal"][start:stop] = s
            comps["noise"][start:stop] = r
    src = np.arange(plan.n_traces) % len(sig_all)
    return TraceSet(
        samples=total,
        plaintexts=signal_traces.plaintexts[src],
        keys=None if signal_traces.keys is None else signal_traces.keys[src],
        island_voltages=island_volts,
        island_config=cfg,
        provenance="synthetic",
        components=comps,
    )


def synthesize(plan: SynthPlan) -> TraceSet:
    """Full pipeline: fresh base traces per island, composed under ``plan``."""
    n = plan.island_config.n_islands
    signal = generate_base_set(plan.n_traces, plan.signal_key, plan.pulse, plan.rng_seed, "signal")
    noise = None
    if n > 1:
        noise = generate_base_set(plan.n_traces * (n - 1), plan.signal_key, plan.pulse, plan.rng_seed, "noise-islands")
    return compose_irdvs(signal, noise, plan)


# --------------------------------------------------------------------------
# misalignment and region of interest


def corrupt_unstable_clock(samples, jitter_pct: float, rng, segment: int = 16) -> np.ndarray:
    """Locally re-time a trace: each ``segment``-sample stretch runs at a random
    rate in ``[1 - jitter_pct, 1 + jitter_pct]``."""
    if not 0 <= jitter_pct < 1:
        raise ValueError("jitter_pct must be in [0, 1)")
    x = check_samples(samples)
    if jitter_pct == 0 or x.size < 2:
        return x.copy()
    g = _rng.as_generator(rng)
    knots_in = np.arange(0, x.size - 1, segment, dtype=np.float64)
    knots_in = np.append(knots_in, x.size - 1)
    rates = g.uniform(1 - jitter_pct, 1 + jitter_pct, size=knots_in.size - 1)
    knots_out = np.concatenate([[0.0], np.cumsum(np.diff(knots_in) * rates)])
    m = int(math.floor(knots_out[-1] + 0.5)) + 1
    u = np.linspace(0.0, knots_out[-1], m)
    pos = np.interp(u, knots_out, knots_in)
    return np.interp(pos, np.arange(x.size), x)


def roi_start(X: np.ndarray, window: int) -> int:
    """Earliest window start maximising the mean across-trace sample variance."""
    X = check_traces(X)
    if not 1 <= window <= X.shape[1]:
        raise ValueError(f"window {window} out of range for traces of length {X.shape[1]}")
    var = X.var(axis=0)
    sums = np.lib.stride_tricks.sliding_window_view(var, window).sum(axis=1)
    return int(np.argmax(sums))


def extract_roi(ts: TraceSet, window: int) -> TraceSet:
    if ts.is_ragged:
        raise ValueError("extract_roi needs uniform trace lengths")
    if window > ts.n_samples or window < 1:
        raise ValueError(f"window too large: {window} > {ts.n_samples}")
    start = roi_start(ts.samples, window)
    comps = None
    if ts.components is not None:
        comps = {k: v[:, start:start + window] for k, v in ts.components.items()}
    return ts.replace(samples=ts.samples[:, start:start + window], components=comps)


class ROIExtractor(TransformerMixin, BaseEstimator):
    """Crop traces to the fixed-size window of highest across-trace variance."""

    def __init__(self, window: int = 64):
        self.window = window

    def fit(self, X, y=None):
        X = check_traces(X)
        self.start_ = roi_start(X, self.window)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "start_")
        X = check_traces(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} samples, got {X.shape[1]}")
        return X[:, self.start_:self.start_ + self.window]
