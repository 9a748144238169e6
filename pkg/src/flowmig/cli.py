"""Command line harness: single runs, parameter sweeps with paired
with/without-migration seeding, trace checking, and CSV reports.

Subcommands::

    flowmig run --scenario cfg.json [--out-dir DIR] [--seed N]
    flowmig sweep --spec sweep.json --out-dir DIR [--reps N] [--parallel N]
    flowmig check TRACE.jsonl
    flowmig report CSV --out-dir DIR

Exit codes: 0 success, 1 property violation (check), 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from flowmig import checkers
from flowmig.core import Trace
from flowmig.fms import (
    ALL_PAIRS,
    NEW_PATH_PAIRS,
    OLD_PATH_PAIRS,
    ConfigError,
    run_simulation,
    scenario_from_dict,
)
from flowmig.transport import compute_goodput

# defaults for the shipped experiment setup: a 15 s migration start into a
# ~1.48 MB transfer over 10 Mbps links with 10 ms one-way delays and 1000 B
# payloads
DEFAULT_T1_S = 15.0
DEFAULT_TOTAL_BYTES = 1_481_481
DEFAULT_BANDWIDTH_BPS = 10_000_000
DEFAULT_DELAY_MS = 10.0
DEFAULT_PAYLOAD_BYTES = 1000

VERDICT_COLS = ("L", "N", "O", "SO", "E", "WeakO_R1", "WeakO_R2", "EventualSync")
CSV_COLS = ("point_id", "param_value", "rep", "seed", "strategy", "goodput_bps",
            "ratio") + VERDICT_COLS + ("dup_acks", "retransmits",
                                       "spurious_retransmits",
                                       "max_reorder_displacement")

SWEEP_PARAMS = ("old_path_extra_delay_ms", "new_path_extra_delay_ms",
                "new_path_bandwidth_factor", "absolute_delay_ms",
                "absolute_bandwidth_bps", "payload_model", "t1_s")


def default_scenario() -> dict:
    return {
        "flow": {"total_bytes": DEFAULT_TOTAL_BYTES,
                 "payload_bytes": DEFAULT_PAYLOAD_BYTES,
                 "arrival": "fixed"},
        "strategy": "WeakO",
        "t1_s": DEFAULT_T1_S,
        "seed": 0,
    }


def _explicit_topology(d: dict) -> list:
    topo = d.get("topology", {}).get("links")
    if topo:
        return [dict(entry) for entry in topo]
    return [{"from": a, "to": b, "bandwidth_bps": DEFAULT_BANDWIDTH_BPS,
             "delay_ms": DEFAULT_DELAY_MS} for a, b in ALL_PAIRS]


def apply_sweep_param(base: dict, param: str, value) -> dict:
    """Derive one sweep point's scenario dict from the base scenario."""
    d = json.loads(json.dumps(base))  # deep copy
    if param == "t1_s":
        d["t1_s"] = value
        return d
    if param == "payload_model":
        d.setdefault("flow", {})["arrival"] = value
        return d
    links = _explicit_topology(d)
    old_pairs = {frozenset(p) for p in OLD_PATH_PAIRS}
    new_pairs = {frozenset(p) for p in NEW_PATH_PAIRS}
    nf_pairs = {frozenset(("s1", "nf_src")), frozenset(("nf_src", "s2"))}
    for entry in links:
        pair = frozenset((entry["from"], entry["to"]))
        if param == "old_path_extra_delay_ms" and pair in nf_pairs:
            entry["delay_ms"] = entry["delay_ms"] + value
        elif param == "new_path_extra_delay_ms" and pair in new_pairs:
            entry["delay_ms"] = entry["delay_ms"] + value
        elif param == "new_path_bandwidth_factor" and pair in new_pairs:
            entry["bandwidth_bps"] = int(entry["bandwidth_bps"] * value)
        elif param == "absolute_delay_ms":
            entry["delay_ms"] = value
        elif param == "absolute_bandwidth_bps":
            entry["bandwidth_bps"] = int(value)
    d["topology"] = {"links": links}
    return d


@dataclass
class RunSummary:
    goodput_with: float | None
    goodput_without: float | None
    verdicts: dict
    counters: dict

    @property
    def ratio(self) -> float | None:
        if self.goodput_with and self.goodput_without:
            return self.goodput_with / self.goodput_without
        return None


def run_pair(scenario_dict: dict, seed: int) -> RunSummary:
    """Run the scenario and its NoMigration twin with the same seed."""
    d = json.loads(json.dumps(scenario_dict))
    d["seed"] = seed
    trace = run_simulation(scenario_from_dict(d))
    base = dict(d)
    base["strategy"] = "NoMigration"
    base_trace = run_simulation(scenario_from_dict(base))
    verdicts = checkers.check_all(trace)
    rm = checkers.reorder_metrics(trace)
    summary = trace.transport[-1]
    counters = {
        "dup_acks": summary["dup_acks"],
        "retransmits": summary["retransmits"],
        "spurious_retransmits": summary["spurious_retransmits"],
        "max_reorder_displacement": rm.max_displacement,
    }
    return RunSummary(compute_goodput(trace), compute_goodput(base_trace),
                      verdicts, counters)


def _sweep_point(args) -> list:
    point_id, param, value, base, reps, seed0 = args
    rows = []
    scenario = apply_sweep_param(base, param, value)
    for rep in range(reps):
        seed = seed0 + point_id * 1000 + rep
        row = {"point_id": point_id, "param_value": value, "rep": rep,
               "seed": seed, "strategy": scenario["strategy"]}
        try:
            rs = run_pair(scenario, seed)
            row["goodput_bps"] = f"{rs.goodput_with:.3f}"
            row["ratio"] = f"{rs.ratio:.6f}"
            for name in VERDICT_COLS:
                row[name] = 1 if rs.verdicts[name].passed else 0
            row.update(rs.counters)
        except Exception as exc:  # record the failure, keep sweeping
            row["goodput_bps"] = ""
            row["ratio"] = ""
            for name in VERDICT_COLS:
                row[name] = "ERR"
            row.update({"dup_acks": "", "retransmits": "",
                        "spurious_retransmits": "",
                        "max_reorder_displacement": f"ERR:{type(exc).__name__}"})
        rows.append(row)
    return rows


def cmd_run(args) -> int:
    try:
        d = json.loads(Path(args.scenario).read_text())
        if args.seed is not None:
            d["seed"] = args.seed
        sc = scenario_from_dict(d)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    trace = run_simulation(sc)
    verdicts = checkers.check_all(trace)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"trace_{sc.scenario_id()}_{sc.seed}.jsonl"
    trace_path.write_text(trace.to_jsonl())
    summary = {
        "scenario_id": sc.scenario_id(),
        "seed": sc.seed,
        "strategy": sc.strategy,
        "goodput_bps": round(compute_goodput(trace), 3),
        "verdicts": {k: v.passed for k, v in verdicts.items()},
        "details": {k: v.detail for k, v in verdicts.items() if not v.passed},
        "trace": trace_path.name,
    }
    (out_dir / f"summary_{sc.scenario_id()}_{sc.seed}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    try:
        spec = json.loads(Path(args.spec).read_text())
        base = spec.get("base") or default_scenario()
        param = spec["param"]
        values = spec["values"]
        reps = args.reps or spec.get("reps", 20)
        if param not in SWEEP_PARAMS:
            raise ConfigError("param", f"must be one of {SWEEP_PARAMS}")
        if reps < 1:
            raise ConfigError("reps", "must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    seed0 = args.seed if args.seed is not None else base.get("seed", 0)
    jobs = [(i, param, v, base, reps, seed0) for i, v in enumerate(values)]
    if args.parallel and args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sweep.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLS)
        w.writeheader()
        for rows in results:
            for row in rows:
                w.writerow(row)
    print(f"wrote {csv_path}")
    return 0


def cmd_check(args) -> int:
    trace = Trace.from_jsonl(Path(args.trace).read_text())
    verdicts = checkers.check_all(trace)
    ok = True
    for name in VERDICT_COLS:
        v = verdicts[name]
        status = "pass" if v.passed else f"FAIL  {v.detail}"
        print(f"{name:>14}: {status}")
        ok = ok and v.passed
    return 0 if ok else 1


# two-sided 95% critical values of Student's t for small sample sizes
_T95 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
        8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160,
        14: 2.145, 15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093,
        20: 2.086, 21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060,
        26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042}


def _ci95(xs: list) -> tuple:
    m = statistics.fmean(xs)
    if len(xs) < 2:
        return m, 0.0
    sd = statistics.stdev(xs)
    t = _T95.get(len(xs) - 1, 1.96)
    return m, t * sd / math.sqrt(len(xs))


def summarize_csv(rows: list) -> list:
    """Per-point means and 95% confidence intervals plus trend flags."""
    points: dict = {}
    for row in rows:
        if row["goodput_bps"] == "":
            continue
        key = (int(row["point_id"]), row["param_value"])
        points.setdefault(key, {"goodput": [], "ratio": []})
        points[key]["goodput"].append(float(row["goodput_bps"]))
        points[key]["ratio"].append(float(row["ratio"]))
    out = []
    for (pid, value), data in sorted(points.items()):
        gm, gci = _ci95(data["goodput"])
        rm, rci = _ci95(data["ratio"])
        out.append({
            "point_id": pid, "param_value": value, "n": len(data["goodput"]),
            "goodput_mean": gm, "goodput_ci95": gci,
            "ratio_mean": rm, "ratio_ci95": rci,
            "comparable": rm >= 0.95,
        })
    return out


def trend_flags(summary: list) -> dict:
    means = [p["goodput_mean"] for p in summary]
    ratios = [p["ratio_mean"] for p in summary]
    return {
        "all_comparable": all(p["comparable"] for p in summary),
        "non_increasing_mean": all(a >= b for a, b in zip(means, means[1:])),
        "min_ratio": min(ratios) if ratios else None,
        "max_degradation": 1.0 - min(ratios) if ratios else None,
    }


def _render_figures(summary: list, out_dir: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [p["param_value"] for p in summary]
    if any(isinstance(x, str) for x in xs):
        xs = list(range(len(summary)))
    made = []
    for key, label, fname in (("goodput", "goodput (bit/s)", "goodput_vs_param.png"),
                              ("ratio", "goodput ratio (with/without)", "ratio_vs_param.png")):
        fig, ax = plt.subplots(figsize=(6, 4))
        ys = [p[f"{key}_mean"] for p in summary]
        errs = [p[f"{key}_ci95"] for p in summary]
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3)
        if key == "ratio":
            ax.axhline(0.95, linestyle="--", linewidth=0.8, color="gray")
        ax.set_xlabel("swept parameter value")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        made.append(path)
    return made


def cmd_report(args) -> int:
    path = Path(args.csv)
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print("error: empty CSV", file=sys.stderr)
        return 2
    summary = summarize_csv(rows)
    if not summary:
        print("error: no completed runs in CSV", file=sys.stderr)
        return 2
    flags = trend_flags(summary)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{'point':>5} {'value':>12} {'n':>3} {'goodput mean':>14} "
             f"{'±95%':>12} {'ratio':>8} {'±95%':>8} {'comparable':>10}"]
    for p in summary:
        lines.append(f"{p['point_id']:>5} {str(p['param_value']):>12} {p['n']:>3} "
                     f"{p['goodput_mean']:>14.1f} {p['goodput_ci95']:>12.1f} "
                     f"{p['ratio_mean']:>8.4f} {p['ratio_ci95']:>8.4f} "
                     f"{'yes' if p['comparable'] else 'NO':>10}")
    lines.append("")
    lines.append(f"trend flags: {json.dumps(flags, sort_keys=True)}")
    figures = _render_figures(summary, out_dir)
    lines.append("figures: " + ", ".join(f.name for f in figures))
    text = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="flowmig",
                                     description="flow-migration simulator and checker")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    p_run.add_argument("--scenario", required=True)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--seed", type=int)
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("--spec", required=True)
    p_sweep.add_argument("--out-dir", default="out")
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--reps", type=int)
    p_sweep.add_argument("--parallel", type=int, default=1)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_check = sub.add_parser("check", help="check a trace file")
    p_check.add_argument("trace")
    p_check.set_defaults(fn=cmd_check)

    p_report = sub.add_parser("report", help="summarize a sweep CSV")
    p_report.add_argument("csv")
    p_report.add_argument("--out-dir", default="out")
    p_report.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
