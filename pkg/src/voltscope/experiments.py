"""Declarative experiment configs, bundled presets and the run orchestrator.

A config is a nested mapping (normally read from TOML) with a mandatory
``seed``.  Sections: ``synth`` (or ``input``), ``roi``, ``align``,
``attack``, ``sweep``, ``tvla``, ``snr``, ``output``.  Every report is JSON
with a ``schema_version`` field and no wall-clock content, so reruns are
bitwise identical.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import align as _align
from . import cluster as _cluster
from . import cpa as _cpa
from . import metrics as _metrics
from . import synth as _synth
from ._validation import parse_hex_block
from .traces import IslandConfig, TraceSet, read_trace_file, write_trace_file

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PLOT_COLUMNS = ("k", "mtd", "avg_pge", "n", "m")

# exit codes per stage
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CODES = {
    "config": 3,
    "input": 4,
    "synth": 10,
    "roi": 11,
    "align": 12,
    "attack": 13,
    "sweep": 14,
    "tvla": 15,
    "snr": 16,
    "report": 17,
}

DEFAULT_KEY = "000102030405060708090a0b0c0d0e0f"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


# --------------------------------------------------------------------------
# config handling


def load_config(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise StageError("config", f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise StageError("config", f"invalid TOML in {path}: {exc}") from exc


def merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def validate_config(cfg: Mapping) -> dict:
    cfg = dict(cfg)
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise StageError("config", f"unsupported schema_version {version!r}")
    cfg["schema_version"] = SCHEMA_VERSION
    if "seed" not in cfg:
        raise StageError("config", "seed is mandatory")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
        raise StageError("config", "seed must be a non-negative integer")
    if "synth" in cfg and "input" in cfg:
        raise StageError("config", "give either [synth] or [input], not both")
    inp = cfg.get("input")
    if inp is not None and not Path(inp.get("path", "")).is_file():
        raise StageError("config", f"input file does not exist: {inp.get('path')!r}")
    attack = cfg.get("attack", {}).get("type", "none")
    if attack not in ("none", "cpa", "cluster"):
        raise StageError("config", f"unknown attack type {attack!r}")
    return cfg


def island_config_from(section: Mapping) -> IslandConfig:
    n = int(section.get("n_islands", 1))
    m = int(section.get("n_supplies", n))
    mapping = section.get("mapping", "independent" if m == n else "alternating")
    kw = {}
    for name in ("voltage_levels", "alpha", "v_threshold", "c_load_over_k"):
        if name in section:
            kw[name] = tuple(section[name]) if name == "voltage_levels" else float(section[name])
    if isinstance(mapping, str):
        if mapping == "independent":
            if m != n:
                raise ValueError("independent mapping needs n_supplies == n_islands")
            return IslandConfig.independent(n, **kw)
        if mapping == "alternating":
            return IslandConfig.alternating(n, m, **kw)
        if mapping == "adjacent":
            return IslandConfig.adjacent(n, m, **kw)
        raise ValueError(f"unknown mapping {mapping!r}")
    return IslandConfig(n, m, tuple(int(s) for s in mapping), **kw)


def pulse_from(section: Mapping) -> _synth.PulseModel:
    if "noise_sigma" in section:
        sigma = float(section["noise_sigma"])
    else:
        sigma = float(section.get("noise_scale", _synth.DEFAULT_NOISE_SCALE)) * _synth.PULSE_SCALE
    return _synth.PulseModel(
        pulse_width=int(section.get("pulse_width", 32)),
        pulse_shape=section.get("pulse_shape", "halfsine"),
        baseline=float(section.get("baseline", 0.0)),
        noise_sigma=sigma,
        padding=section.get("padding"),
    )


def plan_from(section: Mapping, seed: int, n_traces: int | None = None,
              keep_components: bool = False) -> _synth.SynthPlan:
    return _synth.SynthPlan(
        island_config=island_config_from(section),
        n_traces=int(section.get("n_traces", 1000) if n_traces is None else n_traces),
        rng_seed=int(seed),
        signal_key=parse_hex_block(section.get("key", DEFAULT_KEY), name="key"),
        voltage_policy=_synth.VoltagePolicy(int(section.get("voltage_batch", 1))),
        pulse=pulse_from(section),
        supply_levels=section.get("supply_levels"),
        time_scaling=bool(section.get("time_scaling", True)),
        keep_components=keep_components,
    )


# --------------------------------------------------------------------------
# presets

# voltage-dependent offset added by every island; clustering removes it, plain CPA does not
EXPERIMENT_BASELINE = 128.0

PRESETS: dict[str, dict] = {
    # clustering-attack MTD/PGE against K for 1 to 4 independent islands
    "figure2": {
        "name": "figure2",
        "seed": 1,
        "synth": {"n_traces": 20000, "noise_scale": _synth.DEFAULT_NOISE_SCALE,
                  "baseline": EXPERIMENT_BASELINE},
        "sweep": {"n_islands": [1, 2, 3, 4], "k": [1, 5, 10, 15, 35, 70]},
    },
    # fixed-vs-random TVLA on constant-voltage and on 4-supply iRDVS batches
    "table1-sim": {
        "name": "table1-sim",
        "seed": 1,
        "synth": {"n_islands": 8, "n_supplies": 4, "mapping": "alternating",
                  "voltage_levels": [0.6, 0.65, 0.7, 0.75, 0.8], "pulse_width": 160,
                  "padding": 0, "noise_scale": _synth.DEFAULT_NOISE_SCALE},
        "tvla": {"n_batches": 1000, "batch_size": 32, "fixed_plaintext": "00" * 16,
                 "thresholds": [4.5, 2.0], "constant_voltage": 0.8},
    },
    # CPA before and after elastic alignment on two-island iRDVS
    "elastic-negative": {
        "name": "elastic-negative",
        "seed": 1,
        "synth": {"n_islands": 2, "n_traces": 20000, "noise_scale": _synth.DEFAULT_NOISE_SCALE,
                  "baseline": EXPERIMENT_BASELINE},
        "align": {"compare": True, "reference": "mean", "radius": 8},
        "attack": {"type": "cpa"},
    },
}


def preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise StageError("config", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------------
# reports


def report(kind: str, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, **body}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def write_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")
    return path


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def sweep_rows(rows: dict[int, _cluster.SweepRow], n: int, m: int) -> list[dict]:
    return [{"k": r.k, "mtd": r.mtd.label, "avg_pge": r.avg_pge, "n": n, "m": m}
            for r in rows.values()]


def emit_plot_data(rep: Mapping, out=None) -> str:
    """Long-format CSV (k, mtd, avg_pge, n, m) from a K-sweep report."""
    if rep.get("schema_version") != SCHEMA_VERSION or rep.get("kind") != "k-sweep":
        raise ValueError("schema mismatch: expected a k-sweep report "
                         f"with schema_version {SCHEMA_VERSION}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for row in rep.get("rows", []):
        missing = [c for c in PLOT_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"schema mismatch: row lacks {missing}")
        w.writerow([row["k"], row["mtd"], repr(float(row["avg_pge"])), row["n"], row["m"]])
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


def read_plot_data(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{"k": int(r["k"]), "mtd": r["mtd"], "avg_pge": float(r["avg_pge"]),
             "n": int(r["n"]), "m": int(r["m"])} for r in rows]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# stages


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (ValueError, OSError, KeyError, TypeError) as exc:
                raise StageError(name, str(exc)) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


@_stage("input")
def _load_input(section, cfg_synth):
    island = island_config_from(cfg_synth) if cfg_synth else None
    return read_trace_file(section["path"], island_config=island)


@_stage("synth")
def _synthesize(section, seed, keep_components=False):
    return _synth.synthesize(plan_from(section, seed, keep_components=keep_components))


@_stage("roi")
def _roi(ts, section):
    return _synth.extract_roi(ts, int(section["window"]))


@_stage("align")
def _align_stage(ts, section, n_jobs):
    ref = section.get("reference", 0)
    return _align.align_set(ts, ref, section.get("radius"), normalize=bool(section.get("normalize", False)),
                            n_jobs=n_jobs)


def _key_of(ts, section):
    if "key" in section:
        return parse_hex_block(section["key"], name="key")
    return bytes(ts.keys[0]) if ts.has_key else None


@_stage("attack")
def _attack(ts, section, seed, n_jobs):
    kind = section.get("type", "cpa")
    model = section.get("model", "hw")
    key = _key_of(ts, section)
    schedule = section.get("schedule")
    if kind == "cpa":
        res = _cpa.cpa_attack_all(ts, model, key, n_jobs=n_jobs)
        body = {"attack": "cpa", "model": model, "n_traces": len(ts),
                "bytes": [r.to_dict() for r in res]}
        if key is not None:
            body["avg_pge"] = _cpa.avg_pge(res)
            if schedule is not None:
                body["mtd"] = _cpa.compute_mtd(ts, model, key, schedule, n_jobs=n_jobs).to_dict()
        return report("attack", **body)
    ks = section.get("k", 5)
    ks = [ks] if isinstance(ks, int) else list(ks)
    if key is not None and schedule is not None:
        rows = _cluster.sweep_k(ts, ks, model, key, seed, schedule=schedule,
                                roi_window=section.get("roi_window"),
                                remove_mean=bool(section.get("remove_mean", False)), n_jobs=n_jobs)
        cfg = ts.island_config
        return report("k-sweep", rows=sweep_rows(rows, cfg.n_islands, cfg.n_supplies),
                      details={str(k): r.to_dict() for k, r in rows.items()})
    per_k = {}
    for k in ks:
        res = _cluster.cluster_attack(ts, k, model, key, seed, roi_window=section.get("roi_window"),
                                      remove_mean=bool(section.get("remove_mean", False)), n_jobs=n_jobs)
        entry = {"bytes": [r.to_dict() for r in res]}
        if key is not None:
            entry["avg_pge"] = _cpa.avg_pge([r.fused_pge for r in res])
        per_k[str(k)] = entry
    return report("cluster-attack", model=model, n_traces=len(ts), per_k=per_k)


@_stage("sweep")
def _sweep(cfg, n_jobs):
    section = cfg["sweep"]
    base = cfg.get("synth", {})
    rows, details = [], {}
    for n in section.get("n_islands", [base.get("n_islands", 1)]):
        syn = merge(base, {"n_islands": int(n), "n_supplies": int(n), "mapping": "independent"})
        ts = _synth.synthesize(plan_from(syn, cfg["seed"]))
        if "roi" in cfg:
            ts = _synth.extract_roi(ts, int(cfg["roi"]["window"]))
        res = _cluster.sweep_k(ts, section["k"], section.get("model", "hw"), _key_of(ts, syn),
                               cfg["seed"], schedule=section.get("schedule"), n_jobs=n_jobs)
        rows += sweep_rows(res, int(n), int(n))
        details[str(n)] = {str(k): r.to_dict() for k, r in res.items()}
    return report("k-sweep", rows=rows, details=details)


@_stage("tvla")
def _tvla(cfg):
    section = cfg["tvla"]
    seed = cfg["seed"]
    syn = cfg.get("synth", {})
    plan = plan_from(syn, seed, n_traces=int(section.get("n_batches", 1000)))
    thresholds = [float(c) for c in section.get("thresholds", [_metrics.TVLA_THRESHOLD])]
    fixed_pt = parse_hex_block(section.get("fixed_plaintext", "00" * 16), name="fixed_plaintext")
    cases = {"irdvs": plan}
    if "constant_voltage" in section:
        v = float(section["constant_voltage"])
        const = merge(syn, {"voltage_levels": [v]})
        cases = {"constant": plan_from(const, seed, n_traces=plan.n_traces), **cases}
    out = {}
    for name, p in cases.items():
        fixed, rand = _metrics.make_tvla_batches(p, fixed_pt, batch_size=int(section.get("batch_size", 32)))
        rep = _metrics.tvla_fixed_vs_random(fixed, rand, thresholds[0], seed)
        out[name] = {
            "lengths": {"min": int(min(fixed.lengths.min(), rand.lengths.min())),
                        "max": int(max(fixed.lengths.max(), rand.lengths.max()))},
            "exceedances": {repr(c): rep.count_exceeding(c) for c in thresholds},
            **rep.to_dict(),
        }
    return report("tvla", cases=out)


@_stage("snr")
def _snr(cfg, ts):
    section = cfg.get("snr", {})
    syn = cfg.get("synth", {})
    island = island_config_from(syn) if syn else ts.island_config
    body = {}
    if section.get("analytic", True) and island.n_islands >= 2:
        p = _metrics.SnrParams.from_levels(island.voltage_levels, island.alpha, n=island.n_islands,
                                           m=island.n_supplies)
        if island.n_islands % 2 == 0:
            body["analytic"] = _metrics.snr_analytic(p)._asdict()
        k = island.n_islands
        body["analytic_general"] = _metrics.snr_general([(p.sigma2_va, p.mu_va, p.sigma2_T, p.mu_T)] * k)
    if section.get("empirical", False) and ts is not None and ts.components is not None:
        body["empirical"] = _metrics.snr_empirical(ts)
    return report("snr", **body)


# --------------------------------------------------------------------------
# orchestrator


def run_experiment(cfg: Mapping, out_dir: str | Path | None = None, n_jobs: int | None = None) -> dict:
    """Run every configured stage and write reports plus ``manifest.json``.

    Returns the manifest.  Raises StageError tagged with the failing stage.
    """
    cfg = validate_config(cfg)
    out = Path(out_dir or cfg.get("output", {}).get("dir", "voltscope-out"))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StageError("report", str(exc)) from exc
    seed = cfg["seed"]
    artifacts: list[Path] = []
    ts: TraceSet | None = None
    want_components = bool(cfg.get("snr", {}).get("empirical", False))

    if "input" in cfg:
        ts = _load_input(cfg["input"], cfg.get("synth"))
    elif "synth" in cfg and "sweep" not in cfg and "tvla" not in cfg:
        ts = _synthesize(cfg["synth"], seed, want_components)
        if cfg.get("output", {}).get("save_traces", True):
            p = out / "traces.itrc"
            write_trace_file(ts, p)
            artifacts.append(p)
    if ts is not None and "roi" in cfg:
        ts = _roi(ts, cfg["roi"])

    if "snr" in cfg:
        artifacts.append(write_json(_snr(cfg, ts), out / "snr.json"))

    if ts is not None and "align" in cfg:
        before = ts
        ts = _align_stage(ts, cfg["align"], n_jobs)
        if cfg["align"].get("compare") and "attack" in cfg:
            artifacts.append(write_json(_attack(before, cfg["attack"], seed, n_jobs), out / "attack_unaligned.json"))

    if ts is not None and cfg.get("attack", {}).get("type", "none") != "none":
        rep = _attack(ts, cfg["attack"], seed, n_jobs)
        artifacts.append(write_json(rep, out / "attack.json"))
        if rep["kind"] == "k-sweep":
            p = out / "plot_data.csv"
            emit_plot_data(rep, p)
            artifacts.append(p)

    if "sweep" in cfg:
        rep = _sweep(cfg, n_jobs)
        artifacts.append(write_json(rep, out / "sweep.json"))
        p = out / "plot_data.csv"
        emit_plot_data(rep, p)
        artifacts.append(p)

    if "tvla" in cfg:
        artifacts.append(write_json(_tvla(cfg), out / "tvla.json"))

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "name": cfg.get("name"),
        "seed": seed,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "artifacts": [{"path": p.name, "sha256": file_sha256(p)} for p in artifacts],
    }
    try:
        write_json(manifest, out / "manifest.json")
    except OSError as exc:
        raise StageError("report", str(exc)) from exc
    return manifest
