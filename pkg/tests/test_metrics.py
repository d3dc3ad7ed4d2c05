import os

import numpy as np
import pytest

from mbmsim.metrics import (MetricsRecord, SessionRow, aggregate_runs, export_run,
                            feedback_ratio, power_gain, read_summary, transmit_rate_kbps,
                            usr, worst_user_distribution)


def test_power_gain_headline_pairs():
    assert power_gain(0.67 * 5.0, 5.0) == pytest.approx(0.33)
    assert power_gain(0.27 * 5.0, 5.0) == pytest.approx(0.73)
    assert power_gain(5.0, 5.0) == 0.0
    assert power_gain(0.0, 5.0) == 1.0
    assert power_gain(1.0, 0.0) is None


def test_subband_power_arithmetic():
    # even power split: 25 subbands at 20 W -> 0.8 W each
    assert 25 * (20.0 / 25.0) == pytest.approx(20.0)
    assert 5 * (20.0 / 25.0) == pytest.approx(4.0)


def test_usr():
    assert usr([True] * 5) == 1.0
    assert usr([True] * 19 + [False]) == pytest.approx(0.95)
    assert usr([False, False]) == 0.0
    with pytest.raises(ValueError):
        usr([])


def test_transmit_rate():
    assert transmit_rate_kbps([120.0]) == pytest.approx(120.0)  # 120 bits /1 ms
    assert transmit_rate_kbps([]) is None


def test_feedback_ratio():
    assert feedback_ratio((100, 50), (100, 50)) == (1.0, 1.0)
    assert feedback_ratio((0, 10), (100, 50)) == (0.0, 0.2)


def test_worst_user_distribution_min_and_order_statistics():
    samples = np.array([-3.0, 5.0, 1.0])
    assert samples.min() == -3.0
    # order-statistics oracle on i.i.d. singles: more users -> heavier left tail
    rng = np.random.default_rng(17)
    singles = rng.normal(10.0, 6.0, 50_000)
    def min_of(k):
        draw = rng.choice(singles, size=(20_000, k))
        return draw.min(axis=1)
    m2, m24 = min_of(2), min_of(24)
    for p in range(1, 51, 5):
        q1 = np.percentile(singles, p)
        q2 = np.percentile(m2, p)
        q24 = np.percentile(m24, p)
        assert q24 <= q2 <= q1


def _record(mode="ptm-adaptive", users=2, seed=1, harq=100, cqi=200, gp=1.0):
    return MetricsRecord(mode=mode, users_per_cell=users, seed=seed, warmup_ttis=0,
                         measured_ttis=10, sessions_evaluated=2, usr=1.0,
                         group_power_w=gp, per_user_power_w=gp / users,
                         avg_harq_attempts=1.1, max_harq_attempts=3,
                         transmit_rate_kbps=500.0, harq_feedback_count=harq,
                         cqi_feedback_count=cqi, gated_tti_fraction=0.0,
                         avg_load=0.7, avg_population=42.0, violations=0,
                         fixed_mcs_index=-1, fixed_width=-1)


class _FakeResult:
    def __init__(self, record):
        self.record = record
        self.sessions = [SessionRow(1, 0, 10, 3, 0.1, 0.0, 0.0, True, "OK", False)]
        self.worst_samples = np.array([-1.0, 0.5, 2.0])
        self.single_samples = np.array([0.0, 1.0, 3.0, 5.0])


def test_export_run_headers_and_determinism(tmp_path):
    res = _FakeResult(_record())
    d1, d2 = tmp_path / "a", tmp_path / "b"
    export_run(res, str(d1))
    export_run(res, str(d2))
    for name in ("summary.csv", "sessions.csv", "fig1.csv"):
        b1 = (d1 / name).read_bytes()
        b2 = (d2 / name).read_bytes()
        assert b1 == b2
        assert b1.splitlines()[0]  # header present
    back = read_summary(str(d1))
    assert back["mode"] == "ptm-adaptive" and back["users_per_cell"] == 2


def test_export_empty_run_headers_only(tmp_path):
    res = _FakeResult(_record())
    res.sessions = []
    res.worst_samples = np.empty(0)
    res.single_samples = np.empty(0)
    export_run(res, str(tmp_path / "empty"))
    lines = (tmp_path / "empty" / "sessions.csv").read_text().splitlines()
    assert len(lines) == 1
    fig1 = (tmp_path / "empty" / "fig1.csv").read_text().splitlines()
    assert fig1[0] == "group_size,bin_left_db,bin_right_db,pdf"


def test_aggregate_runs_figures(tmp_path):
    dirs = []
    specs = [
        _record("ptm-adaptive", 2, 1, harq=1000, cqi=2000, gp=1.0),
        _record("ptm-adaptive", 24, 1, harq=9000, cqi=2000, gp=5.0),
        _record("ptm-nack-oriented", 2, 1, harq=180, cqi=300, gp=1.5),
        _record("ptm-nack-oriented", 24, 1, harq=630, cqi=600, gp=6.0),
        _record("ptp", 2, 1, gp=1.5),
    ]
    for i, rec in enumerate(specs):
        d = tmp_path / f"run{i}"
        export_run(_FakeResult(rec), str(d))
        dirs.append(str(d))
    out = tmp_path / "agg"
    aggregate_runs(dirs, str(out))
    fig2 = (out / "fig2.csv").read_text().splitlines()
    assert fig2[0] == "mode,users_per_cell,watts_per_user"
    assert any(ln.startswith("ptp,2,") for ln in fig2[1:])
    fig3 = (out / "fig3.csv").read_text().splitlines()
    assert fig3[0] == "users_per_cell,harq_feedback_ratio,cqi_feedback_ratio"
    rows = {ln.split(",")[0]: ln.split(",")[1:] for ln in fig3[1:]}
    assert float(rows["2"][0]) == pytest.approx(0.18)
    assert float(rows["24"][0]) == pytest.approx(0.07)
    for name in ("fig4.csv", "fig5.csv", "fig6.csv", "fig7.csv"):
        assert (out / name).exists()
