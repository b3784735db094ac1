"""Trace data model, island/voltage configuration and ITRC file I/O.

ITRC layout (little-endian)::

    header, 24 bytes
        magic      4s   b"ITRC"
        version    u16  1
        flags      u16  bit0 key present, bit1 batch traces (per-trace length)
        n_traces   u32
        n_samples  u32  0 when bit1 is set
        n_islands  u8
        dtype      u8   0 = float32
        batch_size u16
        reserved   4x   zero
    per trace
        plaintext        16 bytes
        key              16 bytes, only if bit0
        island_voltages  n_islands x f32
        length           u32, only if bit1
        samples          length x f32
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import check_block, parse_hex_block

MAGIC = b"ITRC"
VERSION = 1
HEADER = struct.Struct("<4sHHIIBBH4x")
FLAG_KEY = 0x1
FLAG_BATCH = 0x2
DTYPE_F32 = 0

DEFAULT_LEVELS = (0.6, 0.7, 0.8, 0.9, 1.0)
BATCH_PROVENANCE = "tvla-batch"


class TraceFormatError(ValueError):
    """Raised for malformed or corrupt ITRC / CSV input."""


@dataclass(frozen=True)
class IslandConfig:
    """n islands fed by m independent supplies drawing from a discrete level set.

    ``supply_of_island[i]`` is the supply index powering island ``i``; island 0
    is the attacked island by convention.
    """

    n_islands: int = 1
    n_supplies: int = 1
    supply_of_island: tuple[int, ...] = (0,)
    voltage_levels: tuple[float, ...] = DEFAULT_LEVELS
    alpha: float = 2.0
    v_threshold: float = 0.3
    c_load_over_k: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "supply_of_island", tuple(int(s) for s in self.supply_of_island))
        object.__setattr__(self, "voltage_levels", tuple(float(v) for v in self.voltage_levels))
        n, m = self.n_islands, self.n_supplies
        if n < 1 or m < 1:
            raise ValueError("n_islands and n_supplies must be positive")
        if m > n:
            raise ValueError(f"n_supplies ({m}) exceeds n_islands ({n})")
        if len(self.supply_of_island) != n:
            raise ValueError("supply_of_island must map every island")
        if any(not 0 <= s < m for s in self.supply_of_island):
            raise ValueError("supply index out of range")
        if set(self.supply_of_island) != set(range(m)):
            raise ValueError("every supply must power at least one island")
        levels = self.voltage_levels
        if not levels:
            raise ValueError("voltage_levels is empty")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("voltage_levels must be strictly increasing")
        if levels[0] <= self.v_threshold or levels[0] <= 0:
            raise ValueError("every voltage level must exceed v_threshold")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.c_load_over_k <= 0:
            raise ValueError("c_load_over_k must be positive")

    @classmethod
    def independent(cls, n: int, **kwargs) -> "IslandConfig":
        """Every island on its own supply (m = n)."""
        return cls(n, n, tuple(range(n)), **kwargs)

    @classmethod
    def alternating(cls, n: int, m: int, **kwargs) -> "IslandConfig":
        """Island i on supply i mod m."""
        return cls(n, m, tuple(i % m for i in range(n)), **kwargs)

    @classmethod
    def adjacent(cls, n: int, m: int, **kwargs) -> "IslandConfig":
        """Contiguous blocks of islands share a supply."""
        return cls(n, m, tuple(i * m // n for i in range(n)), **kwargs)

    @property
    def v_max(self) -> float:
        return self.voltage_levels[-1]

    @property
    def n_levels(self) -> int:
        return len(self.voltage_levels)

    def island_voltages(self, supply_voltages) -> np.ndarray:
        """Expand per-supply voltages (..., m) to per-island voltages (..., n)."""
        supply_voltages = np.asarray(supply_voltages)
        return supply_voltages[..., list(self.supply_of_island)]

    def to_dict(self) -> dict:
        return {
            "n_islands": self.n_islands,
            "n_supplies": self.n_supplies,
            "supply_of_island": list(self.supply_of_island),
            "voltage_levels": list(self.voltage_levels),
            "alpha": self.alpha,
            "v_threshold": self.v_threshold,
            "c_load_over_k": self.c_load_over_k,
        }


def check_supply_assignment(assignment, config: IslandConfig) -> np.ndarray:
    """Validate per-trace supply voltages (n_traces, m) against the level set."""
    arr = np.atleast_2d(np.asarray(assignment, dtype=np.float64))
    if arr.shape[1] != config.n_supplies:
        raise ValueError(f"expected {config.n_supplies} supply voltages, got {arr.shape[1]}")
    levels = np.asarray(config.voltage_levels)
    if not np.all(np.isclose(arr[..., None], levels, rtol=0, atol=1e-6).any(axis=-1)):
        raise ValueError("supply voltage not in voltage_levels")
    return arr


@dataclass(frozen=True, eq=False)
class Trace:
    samples: np.ndarray
    plaintext: bytes
    key: bytes | None = None
    island_voltages: tuple[float, ...] = (1.0,)
    batch_size: int = 1

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("trace samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(s)):
            raise ValueError("trace samples must be finite")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "plaintext", check_block(self.plaintext, name="plaintext"))
        if self.key is not None:
            object.__setattr__(self, "key", check_block(self.key, name="key"))
        volts = tuple(float(np.float32(v)) for v in self.island_voltages)
        if any(v <= 0 for v in volts):
            raise ValueError("island voltages must be positive")
        object.__setattr__(self, "island_voltages", volts)
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            np.array_equal(self.samples.view(np.uint32), other.samples.view(np.uint32))
            and self.plaintext == other.plaintext
            and self.key == other.key
            and self.island_voltages == other.island_voltages
            and self.batch_size == other.batch_size
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(eq=False)
class TraceSet:
    """Immutable collection of traces sharing one island configuration.

    ``samples`` is an (n_traces, n_samples) float32 matrix, or a tuple of 1-D
    float32 arrays for batch captures whose lengths vary (``batch_size > 1``
    or provenance ``"tvla-batch"``).
    Island voltages are held at file precision (float32).  ``components`` may
    carry per-island contributions kept by the synthesizer; it is never
    written to disk; it and ``provenance`` are ignored by equality.
    """

    samples: np.ndarray | tuple
    plaintexts: np.ndarray
    island_config: IslandConfig = field(default_factory=IslandConfig)
    keys: np.ndarray | None = None
    island_voltages: np.ndarray | None = None
    batch_size: int = 1
    provenance: str = "synthetic"
    sample_rate_hint: float | None = None
    components: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        n_islands = self.island_config.n_islands
        if isinstance(self.samples, (list, tuple)):
            rows = tuple(np.asarray(s, dtype=np.float32) for s in self.samples)
            if not rows:
                raise ValueError("empty trace set")
            if any(r.ndim != 1 or r.size == 0 for r in rows):
                raise ValueError("every trace needs a non-empty 1-D sample vector")
            if self.batch_size > 1 or self.provenance == BATCH_PROVENANCE:
                samples = tuple(_readonly(r.copy()) for r in rows)
            elif len({r.size for r in rows}) == 1:
                samples = np.stack(rows)
            else:
                raise ValueError("non-uniform trace lengths are only allowed for batch captures")
        else:
            samples = np.array(self.samples, dtype=np.float32)
            if samples.ndim != 2 or samples.shape[1] == 0:
                raise ValueError("samples must be a (n_traces, n_samples) matrix")
            if samples.shape[0] == 0:
                raise ValueError("empty trace set")
        if isinstance(samples, np.ndarray):
            if not np.all(np.isfinite(samples)):
                raise ValueError("trace samples must be finite")
            _readonly(samples)
        elif not all(np.all(np.isfinite(r)) for r in samples):
            raise ValueError("trace samples must be finite")
        object.__setattr__(self, "samples", samples)
        n = len(samples)

        pts = np.array(self.plaintexts, dtype=np.uint8)
        if pts.shape != (n, 16):
            raise ValueError(f"plaintexts must have shape ({n}, 16), got {pts.shape}")
        self.plaintexts = _readonly(pts)
        if self.keys is not None:
            keys = np.array(self.keys, dtype=np.uint8)
            if keys.ndim == 1:
                keys = np.broadcast_to(keys, (n, 16)).copy()
            if keys.shape != (n, 16):
                raise ValueError(f"keys must have shape ({n}, 16)")
            self.keys = _readonly(keys)
        if self.island_voltages is None:
            volts = np.full((n, n_islands), self.island_config.v_max, dtype=np.float32)
        else:
            volts = np.array(self.island_voltages, dtype=np.float32).reshape(n, -1)
        if volts.shape[1] != n_islands:
            raise ValueError(f"island_voltages must have {n_islands} columns, got {volts.shape[1]}")
        if np.any(volts <= 0) or np.any(volts <= self.island_config.v_threshold):
            raise ValueError("island voltages must exceed the threshold voltage")
        self.island_voltages = _readonly(volts)
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be positive")
        self.batch_size = int(self.batch_size)
        object.__setattr__(self, "_frozen", True)

    def __setattr__(self, name, value):
        if getattr(self, "_frozen", False):
            raise AttributeError("TraceSet is immutable")
        object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            i = int(idx)
            return Trace(
                samples=self.samples[i],
                plaintext=self.plaintexts[i].tobytes(),
                key=None if self.keys is None else self.keys[i].tobytes(),
                island_voltages=tuple(self.island_voltages[i].tolist()),
                batch_size=self.batch_size,
            )
        return self.subset(idx)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, TraceSet):
            return NotImplemented
        if len(self) != len(other) or self.is_ragged != other.is_ragged:
            return False
        if self.is_ragged:
            same_samples = all(
                np.array_equal(a.view(np.uint32), b.view(np.uint32))
                for a, b in zip(self.samples, other.samples)
            )
        else:
            same_samples = self.samples.shape == other.samples.shape and np.array_equal(
                self.samples.view(np.uint32), other.samples.view(np.uint32)
            )
        same_keys = (self.keys is None and other.keys is None) or (
            self.keys is not None and other.keys is not None and np.array_equal(self.keys, other.keys)
        )
        return (
            same_samples
            and same_keys
            and np.array_equal(self.plaintexts, other.plaintexts)
            and np.array_equal(self.island_voltages.view(np.uint32), other.island_voltages.view(np.uint32))
            and self.batch_size == other.batch_size
            and self.island_config == other.island_config
        )

    @property
    def is_ragged(self) -> bool:
        return isinstance(self.samples, tuple)

    @property
    def n_samples(self) -> int:
        if self.is_ragged:
            raise ValueError("ragged trace set has no single sample count")
        return self.samples.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        if self.is_ragged:
            return np.array([r.size for r in self.samples])
        return np.full(len(self), self.samples.shape[1])

    @property
    def has_key(self) -> bool:
        return self.keys is not None

    def matrix(self) -> np.ndarray:
        """Samples as a float64 (n_traces, n_samples) matrix."""
        if self.is_ragged:
            raise ValueError("ragged traces; interpolate or align to a common length first")
        return self.samples.astype(np.float64)

    def subset(self, idx) -> "TraceSet":
        idx = np.arange(len(self))[idx] if isinstance(idx, slice) else np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        if self.is_ragged:
            samples = tuple(self.samples[i] for i in idx)
        else:
            samples = self.samples[idx]
        comps = None
        if self.components is not None:
            comps = {k: v[idx] for k, v in self.components.items()}
        return self.replace(
            samples=samples,
            plaintexts=self.plaintexts[idx],
            keys=None if self.keys is None else self.keys[idx],
            island_voltages=self.island_voltages[idx],
            components=comps,
        )

    def replace(self, **changes) -> "TraceSet":
        fields_ = dict(
            samples=self.samples,
            plaintexts=self.plaintexts,
            island_config=self.island_config,
            keys=self.keys,
            island_voltages=self.island_voltages,
            batch_size=self.batch_size,
            provenance=self.provenance,
            sample_rate_hint=self.sample_rate_hint,
            components=self.components,
        )
        fields_.update(changes)
        return TraceSet(**fields_)

    def with_samples(self, samples) -> "TraceSet":
        """Same metadata, new sample matrix (drops retained components)."""
        return self.replace(samples=samples, components=None)

    @classmethod
    def from_traces(cls, traces: Iterable[Trace], island_config: IslandConfig | None = None,
                    **kwargs) -> "TraceSet":
        traces = list(traces)
        if not traces:
            raise ValueError("empty trace set")
        if island_config is None:
            island_config = IslandConfig.independent(len(traces[0].island_voltages))
        has_key = [t.key is not None for t in traces]
        if any(has_key) and not all(has_key):
            raise ValueError("either every trace carries a key or none does")
        batch = {t.batch_size for t in traces}
        if len(batch) != 1:
            raise ValueError("traces disagree on batch_size")
        return TraceSet(
            samples=[t.samples for t in traces],
            plaintexts=np.frombuffer(b"".join(t.plaintext for t in traces), np.uint8).reshape(-1, 16),
            keys=(np.frombuffer(b"".join(t.key for t in traces), np.uint8).reshape(-1, 16)
                  if all(has_key) else None),
            island_voltages=[t.island_voltages for t in traces],
            island_config=island_config,
            batch_size=batch.pop(),
            **kwargs,
        )


# --------------------------------------------------------------------------
# ITRC binary format


def encode_trace_set(ts: TraceSet) -> bytes:
    if len(ts) == 0:
        raise ValueError("empty trace set")
    n_islands = ts.island_config.n_islands
    if n_islands > 255:
        raise ValueError("ITRC supports at most 255 islands")
    flags = (FLAG_KEY if ts.has_key else 0) | (FLAG_BATCH if ts.is_ragged else 0)
    n_samples = 0 if ts.is_ragged else ts.n_samples
    header = HEADER.pack(MAGIC, VERSION, flags, len(ts), n_samples, n_islands, DTYPE_F32, ts.batch_size)
    volts = ts.island_voltages.astype("<f4")
    if not ts.is_ragged:
        fields_ = [("pt", "u1", (16,))]
        if ts.has_key:
            fields_.append(("key", "u1", (16,)))
        fields_ += [("v", "<f4", (n_islands,)), ("s", "<f4", (n_samples,))]
        rec = np.zeros(len(ts), dtype=np.dtype(fields_))
        rec["pt"] = ts.plaintexts
        if ts.has_key:
            rec["key"] = ts.keys
        rec["v"] = volts
        rec["s"] = ts.samples.astype("<f4")
        return header + rec.tobytes()
    parts = [header]
    for i, row in enumerate(ts.samples):
        parts.append(ts.plaintexts[i].tobytes())
        if ts.has_key:
            parts.append(ts.keys[i].tobytes())
        parts.append(volts[i].tobytes())
        parts.append(struct.pack("<I", row.size))
        parts.append(row.astype("<f4").tobytes())
    return b"".join(parts)


def write_trace_file(ts: TraceSet, path: str | PathLike) -> None:
    """Write ``ts`` to ``path`` in ITRC format; output bytes depend only on ``ts``."""
    data = encode_trace_set(ts)
    with open(path, "wb") as fh:
        fh.write(data)


def decode_trace_set(data: bytes, island_config: IslandConfig | None = None,
                     provenance: str = "synthetic") -> TraceSet:
    if len(data) < HEADER.size:
        raise TraceFormatError("malformed header: file shorter than 24 bytes")
    magic, version, flags, n_traces, n_samples, n_islands, dtype, batch_size = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TraceFormatError(f"unsupported sample dtype {dtype}")
    if n_traces == 0:
        raise TraceFormatError("malformed header: zero traces")
    if n_islands == 0 or batch_size == 0:
        raise TraceFormatError("malformed header: zero islands or batch size")
    has_key = bool(flags & FLAG_KEY)
    ragged = bool(flags & FLAG_BATCH)
    if not ragged and n_samples == 0:
        raise TraceFormatError("malformed header: zero samples")
    body = memoryview(data)[HEADER.size:]

    if not ragged:
        fields_ = [("pt", "u1", (16,))]
        if has_key:
            fields_.append(("key", "u1", (16,)))
        fields_ += [("v", "<f4", (n_islands,)), ("s", "<f4", (n_samples,))]
        dt = np.dtype(fields_)
        if len(body) != n_traces * dt.itemsize:
            raise TraceFormatError(
                f"truncated payload: expected {n_traces * dt.itemsize} bytes, got {len(body)}")
        rec = np.frombuffer(body, dtype=dt)
        samples = rec["s"].astype(np.float32)
        pts, keys, volts = rec["pt"], (rec["key"] if has_key else None), rec["v"]
        if not np.all(np.isfinite(samples)):
            raise TraceFormatError("NaN or infinite samples in file")
    else:
        off = 0
        rows, pts, keys, volts = [], [], [], []
        fixed = 16 + (16 if has_key else 0) + 4 * n_islands + 4
        for _ in range(n_traces):
            if off + fixed > len(body):
                raise TraceFormatError("truncated payload")
            pts.append(np.frombuffer(body, np.uint8, 16, off))
            off += 16
            if has_key:
                keys.append(np.frombuffer(body, np.uint8, 16, off))
                off += 16
            volts.append(np.frombuffer(body, "<f4", n_islands, off))
            off += 4 * n_islands
            (length,) = struct.unpack_from("<I", body, off)
            off += 4
            if length == 0 or off + 4 * length > len(body):
                raise TraceFormatError("truncated payload")
            row = np.frombuffer(body, "<f4", length, off).astype(np.float32)
            if not np.all(np.isfinite(row)):
                raise TraceFormatError("NaN or infinite samples in file")
            rows.append(row)
            off += 4 * length
        if off != len(body):
            raise TraceFormatError("trailing bytes after last trace")
        samples = tuple(rows)
        pts = np.stack(pts)
        keys = np.stack(keys) if has_key else None
        volts = np.stack(volts)

    if ragged and batch_size == 1:
        provenance = BATCH_PROVENANCE
    if island_config is None:
        island_config = _infer_config(np.asarray(volts), n_islands)
    elif island_config.n_islands != n_islands:
        raise TraceFormatError(
            f"file has {n_islands} islands but island_config has {island_config.n_islands}")
    return TraceSet(
        samples=samples, plaintexts=pts, keys=keys, island_voltages=volts,
        island_config=island_config, batch_size=batch_size, provenance=provenance,
    )


def _infer_config(volts: np.ndarray, n_islands: int) -> IslandConfig:
    levels = tuple(sorted({round(float(v), 6) for v in volts.ravel()}))
    v_t = IslandConfig.v_threshold
    if levels[0] <= v_t:
        v_t = 0.5 * levels[0]
    return IslandConfig.independent(n_islands, voltage_levels=levels, v_threshold=v_t)


def read_trace_file(path: str | PathLike, island_config: IslandConfig | None = None,
                    provenance: str = "synthetic") -> TraceSet:
    """Read an ITRC file.

    The format stores per-island voltages but not the supply mapping or
    delay-model constants; pass ``island_config`` to attach them.  Without
    it an independent-supply config is inferred from the observed voltages.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_trace_set(data, island_config=island_config, provenance=provenance)


# --------------------------------------------------------------------------
# CSV import


def import_csv(path: str | PathLike, column_map: Mapping[str, object] | None = None,
               island_config: IslandConfig | None = None) -> TraceSet:
    """Import a trace CSV with a header row.

    ``column_map`` keys: ``plaintext`` (default ``"plaintext"``), ``key``
    (optional, default ``"key"`` when present), ``samples`` (list of column
    names; default every other column), ``voltages`` (optional list of
    per-island voltage columns).
    """
    column_map = dict(column_map or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TraceFormatError("empty CSV") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise TraceFormatError("CSV has no data rows")

    pt_col = column_map.get("plaintext", "plaintext")
    key_col = column_map.get("key", "key" if "key" in header else None)
    volt_cols: Sequence[str] = column_map.get("voltages", ())
    meta = {pt_col, key_col, *volt_cols}
    sample_cols = column_map.get("samples") or [h for h in header if h not in meta]
    for col in [pt_col, *([key_col] if key_col else []), *volt_cols, *sample_cols]:
        if col not in header:
            raise TraceFormatError(f"missing CSV column {col!r}")
    if not sample_cols:
        raise TraceFormatError("CSV needs at least one sample column")
    pos = {h: i for i, h in enumerate(header)}

    samples, pts, keys, volts = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise TraceFormatError(f"ragged rows: line {lineno} has {len(row)} fields, header has {len(header)}")
        cells = [c.strip() for c in row]
        try:
            pts.append(parse_hex_block(cells[pos[pt_col]], name="plaintext"))
            if key_col:
                keys.append(parse_hex_block(cells[pos[key_col]], name="key"))
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from None
        vals = [cells[pos[c]] for c in sample_cols]
        if any(v == "" for v in vals):
            raise TraceFormatError(f"ragged rows: line {lineno} has empty sample cells")
        try:
            samples.append([float(v) for v in vals])
            if volt_cols:
                volts.append([float(cells[pos[c]]) for c in volt_cols])
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: non-numeric value ({exc})") from None

    arr = np.array(samples, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise TraceFormatError("NaN or infinite samples in CSV")
    if island_config is None:
        island_config = IslandConfig.independent(len(volt_cols) or 1)
    return TraceSet(
        samples=arr.astype(np.float32),
        plaintexts=np.frombuffer(b"".join(pts), np.uint8).reshape(-1, 16),
        keys=np.frombuffer(b"".join(keys), np.uint8).reshape(-1, 16) if key_col else None,
        island_voltages=np.array(volts) if volt_cols else None,
        island_config=island_config,
        provenance="imported",
    )
