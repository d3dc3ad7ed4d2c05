"""Run metrics: accrual results, power gain, USR, feedback ratios, CSV export.

Per-run outputs: summary.csv (one row), sessions.csv (one row per evaluated
session), fig1.csv (worst-user quality distributions). Cross-run outputs
(mode sweeps, matched-seed feedback ratios) are written by aggregate_runs from
a set of run directories; they are named by content after the quantities the
comparison plots use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np


def fmt(x) -> str:
    """Stable 6-significant-digit formatting for CSV cells."""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        if x != x:
            return "nan"
        return f"{x:.6g}"
    return str(x)


@dataclass
class MetricsRecord:
    mode: str
    users_per_cell: int
    seed: int
    warmup_ttis: int
    measured_ttis: int
    sessions_evaluated: int
    usr: float
    group_power_w: float          # average MBMS-attributed watts per cell
    per_user_power_w: float
    avg_harq_attempts: float
    max_harq_attempts: int
    transmit_rate_kbps: float
    harq_feedback_count: int
    cqi_feedback_count: int
    gated_tti_fraction: float
    avg_load: float
    avg_population: float
    violations: int
    fixed_mcs_index: int
    fixed_width: int


@dataclass
class SessionRow:
    ue_id: int
    spawn_tti: int
    end_tti: int
    cell: int
    wait_s: float
    stall_s: float
    loss_rate: float
    satisfied: bool
    reason: str
    truncated: bool


def power_gain(p0: float, pref: float) -> float | None:
    """(P_ref - P_0)/P_ref; None when the reference power is absent or zero."""
    if pref is None or p0 is None or pref <= 0.0:
        return None
    return (pref - p0) / pref


def usr(verdicts) -> float:
    """Satisfied fraction over evaluated sessions."""
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("no sessions to evaluate")
    return sum(1 for v in verdicts if v) / len(verdicts)


def avg_harq_attempts(attempt_counts) -> float:
    counts = list(attempt_counts)
    if not counts:
        raise ValueError("no completed HARQ processes")
    return sum(counts) / len(counts)


def transmit_rate_kbps(tb_bits_per_scheduled_tti) -> float | None:
    """Mean transport-block bits per scheduled TTI; bits per 1 ms = kbps."""
    vals = list(tb_bits_per_scheduled_tti)
    if not vals:
        return None
    return sum(vals) / len(vals)


def feedback_ratio(scheme_counts: tuple[int, int], baseline_counts: tuple[int, int]):
    """(harq_ratio, cqi_ratio) of a reduced-feedback run vs its matched baseline."""
    harq_b, cqi_b = baseline_counts
    harq_s, cqi_s = scheme_counts
    harq_ratio = harq_s / harq_b if harq_b else float("nan")
    cqi_ratio = cqi_s / cqi_b if cqi_b else float("nan")
    return harq_ratio, cqi_ratio


def worst_user_distribution(samples: np.ndarray, n_bins: int = 60,
                            lo: float | None = None, hi: float | None = None):
    """Empirical PDF of worst-user quality; returns (bin_edges, pdf)."""
    s = np.asarray(samples, dtype=float)
    if s.size == 0:
        return np.empty(0), np.empty(0)
    lo = np.floor(s.min()) if lo is None else lo
    hi = np.ceil(s.max()) if hi is None else hi
    hist, edges = np.histogram(s, bins=n_bins, range=(lo, hi), density=True)
    return edges, hist


SUMMARY_COLUMNS = [f.name for f in fields(MetricsRecord)]
SESSION_COLUMNS = ["ue_id", "spawn_tti", "end_tti", "cell", "wait_s", "stall_s",
                   "loss_rate", "satisfied", "reason", "truncated"]


def export_run(result, out_dir: str):
    """summary.csv + sessions.csv + fig1.csv for one run (headers always present)."""
    os.makedirs(out_dir, exist_ok=True)
    rec = result.record
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        fh.write(",".join(fmt(getattr(rec, c)) for c in SUMMARY_COLUMNS) + "\n")
    with open(os.path.join(out_dir, "sessions.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(SESSION_COLUMNS) + "\n")
        for s in result.sessions:
            fh.write(",".join(fmt(getattr(s, c)) for c in SESSION_COLUMNS) + "\n")
    with open(os.path.join(out_dir, "fig1.csv"), "w", encoding="utf-8") as fh:
        fh.write("group_size,bin_left_db,bin_right_db,pdf\n")
        for size, samples in ((rec.users_per_cell, result.worst_samples),
                              (1, result.single_samples)):
            edges, pdf = worst_user_distribution(samples)
            for i in range(len(pdf)):
                fh.write(f"{size},{fmt(float(edges[i]))},{fmt(float(edges[i + 1]))},"
                         f"{fmt(float(pdf[i]))}\n")
    np.savez_compressed(os.path.join(out_dir, "quality_samples.npz"),
                        worst=result.worst_samples, singles=result.single_samples)


def read_summary(run_dir: str) -> dict:
    path = os.path.join(run_dir, "summary.csv")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        row = fh.readline().strip().split(",")
    out = {}
    for k, v in zip(header, row):
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def aggregate_runs(run_dirs: list[str], out_dir: str):
    """Cross-run figure CSVs from per-run summaries (mean over seeds per point)."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [read_summary(d) for d in run_dirs]

    def points(metric):
        by_key = {}
        for r in rows:
            by_key.setdefault((r["mode"], r["users_per_cell"]), []).append(r[metric])
        return {k: float(np.mean(v)) for k, v in sorted(by_key.items())}

    def write(fname, header, lines):
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for ln in lines:
                fh.write(ln + "\n")

    write("fig2.csv", "mode,users_per_cell,watts_per_user",
          [f"{m},{n},{fmt(v)}" for (m, n), v in points("per_user_power_w").items()])
    write("fig4.csv", "mode,users_per_cell,usr",
          [f"{m},{n},{fmt(v)}" for (m, n), v in points("usr").items()])
    write("fig5.csv", "mode,users_per_cell,watts_per_group",
          [f"{m},{n},{fmt(v)}" for (m, n), v in points("group_power_w").items()])
    write("fig6.csv", "mode,users_per_cell,transmit_rate_kbps",
          [f"{m},{n},{fmt(v)}" for (m, n), v in points("transmit_rate_kbps").items()])
    write("fig7.csv", "mode,users_per_cell,avg_harq_attempts",
          [f"{m},{n},{fmt(v)}" for (m, n), v in points("avg_harq_attempts").items()])

    # feedback ratios: reduced-feedback runs vs matched (seed, group size) baselines
    base = {(r["users_per_cell"], r["seed"]): r for r in rows if r["mode"] == "ptm-adaptive"}
    ratio_rows = {}
    for r in rows:
        if r["mode"] != "ptm-nack-oriented":
            continue
        b = base.get((r["users_per_cell"], r["seed"]))
        if b is None:
            continue
        hr, cr = feedback_ratio((r["harq_feedback_count"], r["cqi_feedback_count"]),
                                (b["harq_feedback_count"], b["cqi_feedback_count"]))
        ratio_rows.setdefault(r["users_per_cell"], []).append((hr, cr))
    lines = []
    for n, vals in sorted(ratio_rows.items()):
        hr = float(np.mean([v[0] for v in vals]))
        cr = float(np.mean([v[1] for v in vals]))
        lines.append(f"{n},{fmt(hr)},{fmt(cr)}")
    write("fig3.csv", "users_per_cell,harq_feedback_ratio,cqi_feedback_ratio", lines)
