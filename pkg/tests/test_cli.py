import json

import pytest

from flowmig.cli import (
    CSV_COLS,
    SWEEP_PARAMS,
    apply_sweep_param,
    main,
    run_pair,
    summarize_csv,
    trend_flags,
)

from conftest import make_scenario_dict


@pytest.fixture
def sweep_spec(tmp_path):
    def write(param="t1_s", values=(0.2, 0.3), reps=2, **base_overrides):
        spec = {"base": make_scenario_dict(**base_overrides),
                "param": param, "values": list(values), "reps": reps}
        p = tmp_path / "sweep_spec.json"
        p.write_text(json.dumps(spec))
        return p
    return write


# -- run --

def test_run_writes_trace_and_summary(scenario_file, tmp_path):
    out = tmp_path / "out"
    rc = main(["run", "--scenario", str(scenario_file()), "--out-dir", str(out)])
    assert rc == 0
    traces = list(out.glob("trace_*.jsonl"))
    summaries = list(out.glob("summary_*.json"))
    assert len(traces) == 1 and len(summaries) == 1
    summary = json.loads(summaries[0].read_text())
    assert all(summary["verdicts"].values())
    assert summary["goodput_bps"] > 0


def test_run_rejects_bad_config(scenario_file, tmp_path, capsys):
    rc = main(["run", "--scenario", str(scenario_file(strategy="Magic")),
               "--out-dir", str(tmp_path / "out")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_run_rejects_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["run", "--scenario", str(bad), "--out-dir", str(tmp_path / "out")])
    assert rc == 2


def test_run_is_reproducible(scenario_file, tmp_path):
    cfg = scenario_file()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--scenario", str(cfg), "--out-dir", str(out)]) == 0
        (trace,) = out.glob("trace_*.jsonl")
        outs.append(trace.read_bytes())
    assert outs[0] == outs[1]


# -- check --

def test_check_passes_clean_trace(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--scenario", str(scenario_file()), "--out-dir", str(out)])
    (trace,) = out.glob("trace_*.jsonl")
    assert main(["check", str(trace)]) == 0
    assert capsys.readouterr().out.count("pass") == 8


def test_check_flags_lossy_trace(scenario_file, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", "--scenario", str(scenario_file(strategy="FreezeDrop", t1_s=0.1)),
          "--out-dir", str(out)])
    (trace,) = out.glob("trace_*.jsonl")
    assert main(["check", str(trace)]) == 1
    assert "FAIL" in capsys.readouterr().out


# -- sweep --

def test_sweep_csv_shape(sweep_spec, tmp_path):
    out = tmp_path / "out"
    rc = main(["sweep", "--spec", str(sweep_spec()), "--out-dir", str(out)])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLS)
    assert len(lines) == 1 + 2 * 2  # 2 points x 2 reps
    for line in lines[1:]:
        cells = dict(zip(CSV_COLS, line.split(",")))
        assert cells["strategy"] == "WeakO"
        assert all(cells[v] == "1" for v in
                   ("L", "N", "O", "SO", "E", "WeakO_R1", "WeakO_R2", "EventualSync"))


def test_sweep_matches_direct_run_pair(sweep_spec, tmp_path):
    out = tmp_path / "out"
    main(["sweep", "--spec", str(sweep_spec(values=(0.2,), reps=1)),
          "--out-dir", str(out)])
    lines = (out / "sweep.csv").read_text().splitlines()
    cells = dict(zip(CSV_COLS, lines[1].split(",")))
    rs = run_pair(make_scenario_dict(), int(cells["seed"]))
    assert cells["goodput_bps"] == f"{rs.goodput_with:.3f}"
    assert cells["ratio"] == f"{rs.ratio:.6f}"


def test_sweep_rejects_unknown_param(sweep_spec, tmp_path, capsys):
    rc = main(["sweep", "--spec", str(sweep_spec(param="link_mtu")),
               "--out-dir", str(tmp_path / "out")])
    assert rc == 2
    assert "config error" in capsys.readouterr().err


# -- report --

def test_report_from_sweep(sweep_spec, tmp_path):
    out = tmp_path / "out"
    main(["sweep", "--spec", str(sweep_spec()), "--out-dir", str(out)])
    rc = main(["report", str(out / "sweep.csv"), "--out-dir", str(out)])
    assert rc == 0
    assert (out / "report.txt").exists()
    assert (out / "goodput_vs_param.png").stat().st_size > 0
    assert (out / "ratio_vs_param.png").stat().st_size > 0
    assert "trend flags" in (out / "report.txt").read_text()


def test_report_rejects_empty_csv(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(CSV_COLS) + "\n")
    rc = main(["report", str(empty), "--out-dir", str(tmp_path / "out")])
    assert rc == 2


# -- sweep parameter application --

BASE = {"flow": {"total_bytes": 1000, "payload_bytes": 100}, "strategy": "WeakO",
        "t1_s": 1.0, "seed": 0}


def links_of(d):
    return {(e["from"], e["to"]): e for e in d["topology"]["links"]}


def test_apply_t1():
    assert apply_sweep_param(BASE, "t1_s", 2.5)["t1_s"] == 2.5


def test_apply_payload_model():
    assert apply_sweep_param(BASE, "payload_model", "poisson")["flow"]["arrival"] == "poisson"


def test_apply_old_path_extra_delay():
    d = apply_sweep_param(BASE, "old_path_extra_delay_ms", 40)
    ls = links_of(d)
    assert ls[("s1", "nf_src")]["delay_ms"] == 50.0
    assert ls[("nf_src", "s2")]["delay_ms"] == 50.0
    assert ls[("s1", "nf_dst")]["delay_ms"] == 10.0
    assert ls[("h1", "s1")]["delay_ms"] == 10.0


def test_apply_new_path_extra_delay():
    d = apply_sweep_param(BASE, "new_path_extra_delay_ms", 20)
    ls = links_of(d)
    assert ls[("s1", "nf_dst")]["delay_ms"] == 30.0
    assert ls[("nf_dst", "s2")]["delay_ms"] == 30.0
    assert ls[("s1", "nf_src")]["delay_ms"] == 10.0


def test_apply_new_path_bandwidth_factor():
    d = apply_sweep_param(BASE, "new_path_bandwidth_factor", 3)
    ls = links_of(d)
    assert ls[("s1", "nf_dst")]["bandwidth_bps"] == 30_000_000
    assert ls[("s1", "nf_src")]["bandwidth_bps"] == 10_000_000


def test_apply_absolute_params():
    d = apply_sweep_param(BASE, "absolute_delay_ms", 5)
    assert all(e["delay_ms"] == 5 for e in d["topology"]["links"])
    d = apply_sweep_param(BASE, "absolute_bandwidth_bps", 2_000_000)
    assert all(e["bandwidth_bps"] == 2_000_000 for e in d["topology"]["links"])


def test_apply_does_not_mutate_base():
    before = json.dumps(BASE, sort_keys=True)
    apply_sweep_param(BASE, "absolute_delay_ms", 5)
    assert json.dumps(BASE, sort_keys=True) == before
    assert SWEEP_PARAMS  # every param above is part of the public set
    for p in ("t1_s", "payload_model", "old_path_extra_delay_ms",
              "new_path_extra_delay_ms", "new_path_bandwidth_factor",
              "absolute_delay_ms", "absolute_bandwidth_bps"):
        assert p in SWEEP_PARAMS


# -- summary statistics --

def test_summarize_and_trend_flags():
    rows = []
    for pid, value, goods in ((0, 0, (10.0, 12.0)), (1, 40, (8.0, 9.0))):
        for rep, g in enumerate(goods):
            rows.append({"point_id": str(pid), "param_value": value, "rep": rep,
                         "goodput_bps": f"{g:.3f}", "ratio": f"{g / 10.0:.6f}"})
    rows.append({"point_id": "1", "param_value": 40, "rep": 9,
                 "goodput_bps": "", "ratio": ""})  # errored rep is skipped
    summary = summarize_csv(rows)
    assert [p["n"] for p in summary] == [2, 2]
    assert summary[0]["goodput_mean"] == pytest.approx(11.0)
    assert summary[0]["goodput_ci95"] > 0
    flags = trend_flags(summary)
    assert flags["non_increasing_mean"] is True
    assert flags["all_comparable"] is False  # point 1 ratio mean 0.85
    assert flags["min_ratio"] == pytest.approx(0.85)
