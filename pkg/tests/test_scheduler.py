import math
from collections import deque

import numpy as np
import pytest

from mbmsim.config import SimulationConfig
from mbmsim.link2sys import default_mcs_table, transport_block_size
from mbmsim.scheduler import (BackgroundLoad, FrameJob, TdMinCqiGate, best_band_start,
                              bg_subband_mask, calibrate_fixed_ptm, cqi_preference_order,
                              drop_stale, mbms_band_width, ptp_weight,
                              select_ptp_assignment, _CalibrationChannel)


@pytest.fixture(scope="module")
def table():
    return default_mcs_table(cqi_point_quantile=0.8)


def test_ptp_weight_monotonicity():
    assert ptp_weight(0.5, 0.0) == pytest.approx(0.5)           # zero age: pure quality
    assert ptp_weight(0.5, 0.5) > ptp_weight(0.5, 0.2)          # older -> heavier
    assert ptp_weight(0.8, 0.3) / ptp_weight(0.4, 0.3) == pytest.approx(2.0)


def test_drop_stale_boundary():
    q = deque([FrameJob(0, 0.0, 100), FrameJob(1, 0.5, 100), FrameJob(2, 1.0, 100)])
    dropped = drop_stale(q, 1.0, 1.0)   # age exactly 1.0 s kept (strict rule)
    assert dropped == []
    dropped = drop_stale(q, 1.21, 1.0)  # first frame aged 1.21 s
    assert [j.frame_id for j in dropped] == [0]
    assert len(q) == 2


def test_gate_threshold_and_boundary():
    gate = TdMinCqiGate(5.0)
    samples = np.linspace(-20, 20, 1001)
    gate.add_samples(samples)
    gate.calibrate()
    assert gate.threshold == pytest.approx(np.percentile(samples, 5.0))
    assert gate.allowed(gate.threshold)          # exactly at threshold: allowed
    assert not gate.allowed(gate.threshold - 1e-6)
    assert gate.allowed(gate.threshold + 3.0)


def test_gate_without_warmup_never_blocks():
    gate = TdMinCqiGate(5.0)
    gate.calibrate()
    assert gate.allowed(-1e9)


def test_background_load_settles_on_target():
    bg = BackgroundLoad(25, 0.7, 1.0, 100)
    used = []
    for _ in range(500):
        fill = bg.fill_count(real_used=3)
        total = 3 + fill
        bg.record(total)
        used.append(total)
    assert np.mean(used[100:]) / 25 == pytest.approx(0.7, abs=0.02)


def test_bg_subband_mask_picks_free_only():
    free = 0b1111111111111111111111111 & ~0b11100
    mask = bg_subband_mask(5, free, 25, offset=1)
    assert bin(mask).count("1") == 5
    assert mask & 0b11100 == 0


def test_mbms_band_width():
    cfg = SimulationConfig()
    # efficiency 1.0: one frame in 10 blocks needs ceil(12800/(120*10)) = 11 subbands
    assert mbms_band_width(1.0, cfg.frame_bits, 10, 25) == 11
    assert mbms_band_width(0.01, cfg.frame_bits, 10, 25) == 25  # clamped
    assert mbms_band_width(100.0, cfg.frame_bits, 10, 25) == 1


def test_best_band_start_matches_brute_force(table):
    rng = np.random.default_rng(15)
    for _ in range(200):
        agg = rng.integers(0, 16, 25)
        w = int(rng.integers(1, 26))
        got = best_band_start(agg, w, table.cqi_point_sinr)
        score = np.log1p(table.cqi_point_sinr[agg])
        best, arg = -1.0, 0
        for s in range(0, 25 - w + 1):
            tot = round(float(score[s:s + w].sum()), 9)
            if tot > best + 1e-9:
                best, arg = tot, s
        assert got == arg


def test_cqi_preference_order_ties_by_index():
    order = cqi_preference_order(np.array([3, 7, 7, 1]))
    assert list(order) == [1, 2, 0, 3]


def test_select_ptp_two_users_disjoint_best_subbands(table):
    # two UEs with disjoint best subbands, no contention: each gets its own
    r1 = np.full(25, 5); r1[:5] = 15
    r2 = np.full(25, 5); r2[5:10] = 15
    used = 0
    picks = {}
    for name, rep in (("a", r1), ("b", r2)):
        order = cqi_preference_order(rep)
        free = order[((used >> order) & 1) == 0]
        subs, m, bits = select_ptp_assignment(rep, free, 1000, table)
        picks[name] = set(int(s) for s in subs)
        used |= int(np.sum(1 << subs.astype(np.int64)))
    assert picks["a"] <= set(range(5))
    assert picks["b"] <= set(range(5, 10))
    assert not (picks["a"] & picks["b"])


def test_select_ptp_matches_naive_search(table):
    rng = np.random.default_rng(16)
    need = table.thr + math.log(9.0) / table.bler_slope
    for _ in range(100):
        rep = rng.integers(0, 16, 25)
        order = cqi_preference_order(rep)
        target = int(rng.integers(100, 4000))
        subs, m, bits = select_ptp_assignment(rep, order, target, table)
        # naive: for each prefix, highest MCS whose mean MI meets the target
        best = None
        for w in range(1, 26):
            pts = table.cqi_point_sinr[rep[order[:w]]]
            chosen = 0
            for e in table.entries:
                mi = np.minimum(table.mi_alpha * np.log2(1 + pts), e.modulation_order).mean()
                if mi >= need[e.index]:
                    chosen = e.index
            tb = transport_block_size(table.entries[chosen], w)
            if tb >= target:
                best = (w, chosen, tb)
                break
        if best is not None:
            assert (len(subs), m, bits) == best
        else:
            assert bits < target  # fallback keeps the efficient prefix


def test_calibration_coverage_monotone_in_mcs():
    # within the rate-feasible MCS range, a more robust entry never covers
    # (materially) fewer users at the same width
    cfg = SimulationConfig()
    table = default_mcs_table(cfg.mi_alpha, cfg.bler_slope, cfg.mi_threshold_scale,
                              cfg.cqi_point_quantile)
    chan = _CalibrationChannel(cfg, n_users=120, n_frames=8)
    w = 19
    budget = cfg.frame_interval_ttis
    feasible = [m for m in range(len(table))
                if cfg.ptm_fixed_tx_count * math.ceil(
                    cfg.frame_bits / transport_block_size(table.entries[m], w)) <= budget]
    usrs = [chan.usr(table, m, w) for m in feasible[:8:2]]
    for lo, hi in zip(usrs, usrs[1:]):
        assert lo >= hi - 0.02


def test_calibration_returns_feasible_plan(tmp_path):
    cfg = SimulationConfig()
    table = default_mcs_table(cfg.mi_alpha, cfg.bler_slope, cfg.mi_threshold_scale,
                              cfg.cqi_point_quantile)
    cache = str(tmp_path / "cal.txt")
    plan = calibrate_fixed_ptm(cfg, table, cache)
    k = plan.tbs_per_frame
    assert cfg.ptm_fixed_tx_count * k <= cfg.frame_interval_ttis
    assert 1 <= plan.width <= cfg.n_subbands
    # cached on second call (same result, no recomputation path differences)
    again = calibrate_fixed_ptm(cfg, table, cache)
    assert again == plan
