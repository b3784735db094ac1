import json
import shutil
import subprocess

import numpy as np
import pytest

from voltscope import experiments as ex
from voltscope.cli import components_path, main
from voltscope.traces import read_trace_file

KEY = "000102030405060708090a0b0c0d0e0f"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def small(tmp_path):
    path = tmp_path / "t.itrc"
    assert run("synth", "--seed", 3, "--traces", 400, "--levels", "1.0", "--noise-scale", 0.5,
               "--out", path) == 0
    return path


def test_synth_writes_file(small):
    ts = read_trace_file(small)
    assert len(ts) == 400 and bytes(ts.keys[0]).hex() == KEY


def test_synth_requires_seed(tmp_path):
    assert run("synth", "--out", tmp_path / "x.itrc") == ex.EXIT_CODES["config"]


def test_synth_bad_parameters(tmp_path):
    assert run("synth", "--seed", 1, "--levels", "0.2", "--out", tmp_path / "x.itrc") == ex.EXIT_CODES["config"]


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.itrc", tmp_path / "b.itrc"
    for p in (a, b):
        run("synth", "--seed", 5, "--islands", 2, "--traces", 200, "--out", p)
    assert a.read_bytes() == b.read_bytes()


def test_attack_cpa(small, tmp_path):
    rep_path = tmp_path / "r.json"
    assert run("attack", "cpa", "--in", small, "--schedule", "100,400", "--report", rep_path) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["schema_version"] == ex.SCHEMA_VERSION and rep["kind"] == "attack"
    assert rep["recovered_key"] == KEY and rep["avg_pge"] == 0
    assert rep["mtd"]["schedule"] == [100, 400]


def test_attack_missing_file(tmp_path):
    assert run("attack", "cpa", "--in", tmp_path / "nope.itrc") == ex.EXIT_CODES["input"]


def test_attack_bad_schedule(small):
    assert run("attack", "cpa", "--in", small, "--schedule", "5000") == ex.EXIT_CODES["attack"]


def test_attack_cluster_sweep(small, tmp_path):
    rep_path, csv_path = tmp_path / "r.json", tmp_path / "p.csv"
    assert run("attack", "cluster", "--in", small, "--seed", 1, "--k-sweep", "1:3:2",
               "--schedule", "200,400", "--report", rep_path, "--plot-data", csv_path) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["kind"] == "k-sweep" and [r["k"] for r in rep["rows"]] == [1, 3]
    assert csv_path.read_text().splitlines()[0] == "k,mtd,avg_pge,n,m"


def test_attack_cluster_needs_seed(small):
    with pytest.raises(SystemExit):
        run("attack", "cluster", "--in", small)


def test_attack_cluster_k_too_large(small):
    assert run("attack", "cluster", "--in", small, "--seed", 0, "--k", 1000) == ex.EXIT_CODES["attack"]


def test_align(tmp_path):
    src, dst = tmp_path / "s.itrc", tmp_path / "a.itrc"
    run("synth", "--seed", 2, "--islands", 2, "--traces", 30, "--out", src)
    assert run("align", "--in", src, "--reference", "mean", "--radius", 4, "--out", dst) == 0
    assert read_trace_file(dst).n_samples == read_trace_file(src).n_samples


def test_align_bad_reference(small, tmp_path):
    assert run("align", "--in", small, "--reference", 10_000, "--out", tmp_path / "a.itrc") == ex.EXIT_CODES["align"]


def test_tvla(tmp_path):
    a, b, rep_path = tmp_path / "a.itrc", tmp_path / "b.itrc", tmp_path / "r.json"
    run("synth", "--seed", 1, "--traces", 100, "--noise-scale", 1, "--out", a)
    run("synth", "--seed", 2, "--traces", 100, "--noise-scale", 1, "--out", b)
    assert run("tvla", "--fixed", a, "--random", b, "--seed", 0, "--report", rep_path) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["kind"] == "tvla" and rep["verdict"] in ("pass", "fail")
    assert rep["threshold"] == 4.5


def test_tvla_too_few(tmp_path):
    a = tmp_path / "a.itrc"
    run("synth", "--seed", 1, "--traces", 3, "--out", a)
    assert run("tvla", "--fixed", a, "--random", a, "--seed", 0) == ex.EXIT_CODES["tvla"]


def test_snr(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 1\n[synth]\nn_islands = 4\n")
    traces = tmp_path / "t.itrc"
    run("synth", "--config", cfg, "--traces", 2000, "--noise-sigma", 0, "--keep-components", "--out", traces)
    assert components_path(traces).is_file()
    rep_path = tmp_path / "r.json"
    assert run("snr", "--config", cfg, "--analytic", "--empirical", traces, "--report", rep_path) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["analytic"]["snr_m_eq_n"] == pytest.approx(1 / 3)
    assert rep["empirical"] == pytest.approx(1 / 3, rel=0.2)


def test_snr_without_components(small):
    assert run("snr", "--empirical", small) == ex.EXIT_CODES["snr"]


def test_import_csv(tmp_path):
    src = tmp_path / "x.csv"
    src.write_text("plaintext,s0,s1\n" + "\n".join(f"{i:032x},{i},{i * 2}" for i in range(4)) + "\n")
    out = tmp_path / "x.itrc"
    assert run("import-csv", src, "--out", out) == 0
    assert read_trace_file(out).samples[3].tolist() == [3.0, 6.0]
    src.write_text("plaintext,s0\nzz,1\n")
    assert run("import-csv", src, "--out", out) == ex.EXIT_CODES["input"]


def _run_preset(tmp_path, name, threads, *extra):
    out = tmp_path / f"{name}-{threads}"
    assert run("--threads", threads, "run", name, "--out", out, *extra) == 0
    return out


def test_run_manifest_lists_every_file(tmp_path):
    out = _run_preset(tmp_path, "elastic-negative", 1, "--traces", 60)
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {a["path"] for a in manifest["artifacts"]}
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert listed == on_disk
    for a in manifest["artifacts"]:
        assert a["sha256"] == ex.file_sha256(out / a["path"])
    assert manifest["config_hash"] == ex.config_hash(manifest["config"])


def test_run_deterministic_across_workers(tmp_path):
    a = _run_preset(tmp_path, "elastic-negative", 1, "--traces", 60)
    b = _run_preset(tmp_path, "elastic-negative", 3, "--traces", 60)
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes()


def test_run_sweep_plot_data(tmp_path):
    out = _run_preset(tmp_path, "figure2", 2, "--traces", 300, "--set", "sweep.n_islands=[1, 2]",
                      "--set", "sweep.k=[1, 5]", "--set", "sweep.schedule=[150, 300]")
    rows = ex.read_plot_data((out / "plot_data.csv").read_text())
    assert [(r["n"], r["k"]) for r in rows] == [(1, 1), (1, 5), (2, 1), (2, 5)]
    sweep = json.loads((out / "sweep.json").read_text())
    assert [r["avg_pge"] for r in sweep["rows"]] == [r["avg_pge"] for r in rows]


def test_run_tvla_preset_small(tmp_path):
    out = _run_preset(tmp_path, "table1-sim", 1, "--set", "tvla.n_batches=8")
    rep = json.loads((out / "tvla.json").read_text())
    assert set(rep["cases"]) == {"constant", "irdvs"}
    for case in rep["cases"].values():
        assert case["exceedances"]["2.0"] >= case["exceedances"]["4.5"]


def test_run_errors(tmp_path):
    assert run("run", "no-such-preset") == ex.EXIT_CODES["config"]
    cfg = tmp_path / "c.toml"
    cfg.write_text("[synth]\nn_traces = 10\n")
    assert run("run", cfg, "--out", tmp_path / "o") == ex.EXIT_CODES["config"]
    cfg.write_text("seed = 1\n[synth]\nn_traces = 10\n[input]\npath = 'x'\n")
    assert run("run", cfg, "--out", tmp_path / "o") == ex.EXIT_CODES["config"]
    cfg.write_text("seed = 1\n[synth\n")
    assert run("run", cfg) == ex.EXIT_CODES["config"]
    cfg.write_text("seed = 1\n[synth]\nn_traces = 10\nvoltage_levels = [0.1]\n")
    assert run("run", cfg, "--out", tmp_path / "o") == ex.EXIT_CODES["synth"]
    assert run("run", "figure2", "--set", "novalue") == ex.EXIT_CODES["config"]


class TestPlotData:
    def _rep(self, rows):
        return ex.report("k-sweep", rows=rows)

    def test_header_only(self):
        assert ex.emit_plot_data(self._rep([])) == "k,mtd,avg_pge,n,m\n"

    def test_lossless(self):
        rows = [{"k": 5, "mtd": "16000", "avg_pge": 0.1 + 0.2, "n": 1, "m": 1},
                {"k": 70, "mtd": ">200000", "avg_pge": 123.0625, "n": 4, "m": 4}]
        assert ex.read_plot_data(ex.emit_plot_data(self._rep(rows))) == rows

    def test_schema_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="schema mismatch"):
            ex.emit_plot_data({"schema_version": 99, "kind": "k-sweep", "rows": []})
        with pytest.raises(ValueError, match="schema mismatch"):
            ex.emit_plot_data(ex.report("attack"))
        p = tmp_path / "r.json"
        ex.write_json(ex.report("attack"), p)
        assert run("plot-data", p) == ex.EXIT_CODES["report"]


def test_console_script(small):
    exe = shutil.which("voltscope")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "attack", "cpa", "--in", str(small)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["recovered_key"] == KEY
    proc = subprocess.run([exe, "bogus"], capture_output=True, text=True)
    assert proc.returncode == ex.EXIT_USAGE


def test_threads_env(monkeypatch, small, tmp_path):
    monkeypatch.setenv("VOLTSCOPE_THREADS", "2")
    p1 = tmp_path / "1.json"
    run("attack", "cpa", "--in", small, "--report", p1)
    monkeypatch.setenv("VOLTSCOPE_THREADS", "1")
    p2 = tmp_path / "2.json"
    run("attack", "cpa", "--in", small, "--report", p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert np.isfinite(json.loads(p1.read_text())["avg_pge"])
