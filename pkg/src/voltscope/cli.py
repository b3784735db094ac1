"""``voltscope`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import align as _align
from . import cpa as _cpa
from . import experiments as ex
from . import metrics as _metrics
from . import synth as _synth
from ._validation import parse_hex_block
from .traces import TraceSet, import_csv, read_trace_file, write_trace_file

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

COMPONENTS_SUFFIX = ".components.npz"


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _reference(text: str):
    return text if text == "mean" else int(text)


def _radius(text: str):
    return None if text == "exact" else int(text)


def _k_values(args) -> list[int]:
    if args.k_sweep:
        try:
            start, stop, step = (int(x) for x in args.k_sweep.split(":"))
        except ValueError:
            raise ex.StageError("config", f"--k-sweep expects START:STOP:STEP, got {args.k_sweep!r}") from None
        return list(range(start, stop + 1, step))
    return _ints(args.k)


def components_path(trace_path: str | Path) -> Path:
    return Path(str(trace_path) + COMPONENTS_SUFFIX)


def _island_section(args) -> dict:
    if getattr(args, "config", None):
        return ex.load_config(args.config).get("synth", {})
    return {}


def _read(path, args, stage="input") -> TraceSet:
    section = _island_section(args)
    try:
        island = ex.island_config_from(section) if section else None
        return read_trace_file(path, island_config=island)
    except (OSError, ValueError) as exc:
        raise ex.StageError(stage, f"{path}: {exc}") from exc


def _write_report(rep: dict, path):
    if path:
        ex.write_json(rep, path)
    else:
        import json
        print(json.dumps(ex._jsonable(rep), sort_keys=True, indent=2))


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    section: dict = {}
    seed = args.seed
    if args.config:
        cfg = ex.load_config(args.config)
        section = dict(cfg.get("synth", {}))
        seed = cfg.get("seed") if seed is None else seed
    if seed is None:
        raise ex.StageError("config", "seed is mandatory (--seed or config)")
    flags = {
        "n_islands": args.islands, "n_supplies": args.supplies, "mapping": args.mapping,
        "n_traces": args.traces, "key": args.key, "noise_scale": args.noise_scale,
        "noise_sigma": args.noise_sigma, "pulse_width": args.pulse_width,
        "voltage_batch": args.voltage_batch, "alpha": args.alpha, "v_threshold": args.vt,
        "baseline": args.baseline,
    }
    if args.levels:
        flags["voltage_levels"] = _floats(args.levels)
    if args.no_time_scaling:
        flags["time_scaling"] = False
    if args.noise_scale is not None:
        section.pop("noise_sigma", None)
    section.update({k: v for k, v in flags.items() if v is not None})
    try:
        plan = ex.plan_from(section, seed, keep_components=args.keep_components)
    except (ValueError, TypeError) as exc:
        raise ex.StageError("config", str(exc)) from exc
    try:
        ts = _synth.synthesize(plan)
        if args.roi:
            ts = _synth.extract_roi(ts, args.roi)
    except ValueError as exc:
        raise ex.StageError("synth", str(exc)) from exc
    write_trace_file(ts, args.out)
    if args.keep_components:
        np.savez(components_path(args.out), signal=ts.components["signal"], noise=ts.components["noise"])


def cmd_import_csv(args) -> None:
    try:
        ts = import_csv(args.input)
    except (OSError, ValueError) as exc:
        raise ex.StageError("input", str(exc)) from exc
    write_trace_file(ts, args.out)


def cmd_attack_cpa(args) -> None:
    ts = _read(args.traces, args)
    key = parse_hex_block(args.key, name="key") if args.key else None
    try:
        res = _cpa.cpa_attack_all(ts, args.model, key, signed=args.signed)
        body = {"attack": "cpa", "model": args.model, "n_traces": len(ts),
                "bytes": [r.to_dict() for r in res],
                "recovered_key": bytes(r.best_guess for r in res).hex()}
        if key is not None or ts.has_key:
            body["avg_pge"] = _cpa.avg_pge(res)
            if args.schedule:
                body["mtd"] = _cpa.compute_mtd(ts, args.model, key, _ints(args.schedule),
                                               signed=args.signed).to_dict()
    except ValueError as exc:
        raise ex.StageError("attack", str(exc)) from exc
    _write_report(ex.report("attack", **body), args.report)


def cmd_attack_cluster(args) -> None:
    ts = _read(args.traces, args)
    key = parse_hex_block(args.key, name="key") if args.key else None
    section = {"type": "cluster", "model": args.model, "k": _k_values(args),
               "roi_window": args.roi, "remove_mean": args.remove_mean}
    if key is not None:
        section["key"] = key.hex()
    if args.schedule:
        section["schedule"] = _ints(args.schedule)
    rep = ex._attack(ts, section, args.seed, None)
    _write_report(rep, args.report)
    if args.plot_data and rep["kind"] == "k-sweep":
        ex.emit_plot_data(rep, args.plot_data)


def cmd_align(args) -> None:
    ts = _read(args.traces, args)
    try:
        out = _align.align_set(ts, _reference(args.reference), args.radius, normalize=args.normalize)
    except ValueError as exc:
        raise ex.StageError("align", str(exc)) from exc
    write_trace_file(out, args.out)


def cmd_tvla(args) -> None:
    fixed = _read(args.fixed, args)
    rand = _read(args.random, args)
    try:
        rep = _metrics.tvla_fixed_vs_random(fixed, rand, args.c, args.seed)
    except ValueError as exc:
        raise ex.StageError("tvla", str(exc)) from exc
    _write_report(ex.report("tvla", **rep.to_dict()), args.report)


def cmd_snr(args) -> None:
    cfg = ex.load_config(args.config) if args.config else {}
    section = cfg.get("synth", {})
    body = {}
    try:
        if args.analytic:
            island = ex.island_config_from(section)
            p = _metrics.SnrParams.from_levels(island.voltage_levels, island.alpha,
                                               n=island.n_islands, m=island.n_supplies)
            moments = [(p.sigma2_va, p.mu_va, p.sigma2_T, p.mu_T)] * island.n_islands
            body["analytic_general"] = _metrics.snr_general(moments)
            if island.n_islands >= 2 and island.n_islands % 2 == 0:
                body["analytic"] = _metrics.snr_analytic(p)._asdict()
        if args.empirical:
            comp = components_path(args.empirical)
            if not comp.is_file():
                raise ValueError(f"decomposition unavailable: {comp} not found "
                                 "(synthesize with --keep-components)")
            with np.load(comp) as z:
                body["empirical"] = _metrics.snr_empirical(None, z["signal"], z["noise"])
    except (ValueError, OSError) as exc:
        raise ex.StageError("snr", str(exc)) from exc
    _write_report(ex.report("snr", **body), args.report)


def _parse_override(text: str) -> dict:
    if "=" not in text:
        raise ex.StageError("config", f"--set expects section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = dotted.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def cmd_run(args) -> None:
    target = args.config
    if Path(target).is_file():
        cfg = ex.load_config(target)
    elif target in ex.PRESETS:
        cfg = ex.preset(target)
    else:
        raise ex.StageError("config", f"{target!r} is neither a config file nor a preset "
                                      f"({', '.join(sorted(ex.PRESETS))})")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.traces is not None:
        cfg = ex.merge(cfg, {"synth": {"n_traces": args.traces}})
    for item in args.set or []:
        cfg = ex.merge(cfg, _parse_override(item))
    manifest = ex.run_experiment(cfg, args.out)
    print(Path(args.out or cfg.get("output", {}).get("dir", "voltscope-out")) / "manifest.json")
    for art in manifest["artifacts"]:
        logging.getLogger("voltscope").info("wrote %s", art["path"])


def cmd_plot_data(args) -> None:
    try:
        rep = ex.read_report(args.report)
        text = ex.emit_plot_data(rep, args.out)
    except (OSError, ValueError) as exc:
        raise ex.StageError("report", str(exc)) from exc
    if not args.out:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltscope", description="iRDVS side-channel workbench")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, help="worker threads (overrides VOLTSCOPE_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize an iRDVS trace set")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--islands", type=int)
    s.add_argument("--supplies", type=int)
    s.add_argument("--mapping", choices=["independent", "alternating", "adjacent"])
    s.add_argument("--levels", help="comma-separated voltage levels")
    s.add_argument("--alpha", type=float)
    s.add_argument("--vt", type=float, help="threshold voltage")
    s.add_argument("--traces", type=int)
    s.add_argument("--key", help="32 hex digits")
    s.add_argument("--baseline", type=float, help="data-independent power level")
    s.add_argument("--noise-scale", type=float, help="noise sigma in units of the pulse scale")
    s.add_argument("--noise-sigma", type=float, help="absolute noise sigma")
    s.add_argument("--pulse-width", type=int)
    s.add_argument("--voltage-batch", type=int, help="traces per voltage draw")
    s.add_argument("--no-time-scaling", action="store_true")
    s.add_argument("--roi", type=int, help="crop to a region-of-interest window")
    s.add_argument("--keep-components", action="store_true",
                   help="also write the signal/noise decomposition next to the trace file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("import-csv", help="convert a CSV trace export to ITRC")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_csv)

    a = sub.add_parser("attack", help="key-recovery attacks")
    asub = a.add_subparsers(dest="attack", required=True)
    for name, fn in (("cpa", cmd_attack_cpa), ("cluster", cmd_attack_cluster)):
        s = asub.add_parser(name)
        s.add_argument("--in", "--traces", dest="traces", required=True)
        s.add_argument("--config", help="config whose [synth] section describes the islands")
        s.add_argument("--model", choices=["hw", "hd"], default="hw")
        s.add_argument("--key", help="known key for PGE/MTD (defaults to the key stored in the file)")
        s.add_argument("--mtd-schedule", "--schedule", dest="schedule",
                       help="comma-separated trace counts for MTD")
        s.add_argument("--report")
        s.set_defaults(func=fn)
        if name == "cpa":
            s.add_argument("--signed", action="store_true")
        else:
            s.add_argument("--k", default="5", help="cluster count or comma-separated list")
            s.add_argument("--k-sweep", metavar="START:STOP:STEP", help="inclusive K range")
            s.add_argument("--seed", type=int, required=True)
            s.add_argument("--roi", type=int)
            s.add_argument("--remove-mean", action="store_true")
            s.add_argument("--plot-data", help="CSV path for K-sweep plot data")

    s = sub.add_parser("align", help="elastic alignment to a reference trace")
    s.add_argument("--in", "--traces", dest="traces", required=True)
    s.add_argument("--config")
    s.add_argument("--reference", default="0", help="trace index or 'mean'")
    s.add_argument("--radius", type=_radius, help="approximate DTW radius, or 'exact' (default)")
    s.add_argument("--normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("tvla", help="fixed-vs-random t-test")
    s.add_argument("--fixed", required=True)
    s.add_argument("--random", required=True)
    s.add_argument("--config")
    s.add_argument("--c", type=float, default=_metrics.TVLA_THRESHOLD)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_tvla)

    s = sub.add_parser("snr", help="analytic and empirical SNR")
    s.add_argument("--config")
    s.add_argument("--analytic", action="store_true")
    s.add_argument("--empirical", metavar="IN")
    s.add_argument("--report")
    s.set_defaults(func=cmd_snr)

    s = sub.add_parser("run", help="run a config file or a named preset")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--traces", type=int)
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("plot-data", help="long-format CSV from a K-sweep report")
    s.add_argument("report")
    s.add_argument("--out")
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ["VOLTSCOPE_THREADS"] = str(args.threads)
    try:
        args.func(args)
    except ex.StageError as exc:
        print(f"voltscope: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"voltscope: [input] {exc}", file=sys.stderr)
        return ex.EXIT_CODES["input"]
    return ex.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
