"""Deterministic TTI-driven simulation loop and run orchestration.

Fixed per-TTI order: mobility/churn -> fading step -> CQI generation ->
feedback processing from prior TTIs -> scheduling -> transmission + decode ->
traffic/QoE update -> metrics accrual. The population is constant, so all
per-UE state lives in fixed-size arrays indexed by slot; every UE draws from
its own named random substreams, so results do not depend on iteration order
and runs are bit-reproducible for a given (config, seed).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .channel import draw_shadowing, large_scale_gain_db, subband_projection, tu6_tap_powers
from .config import N_CELLS, SimulationConfig
from .geometry import build_layout, rewrap_many, spawn_position
from .harq import (ACK, COMPLETE, NACK, RETRANSMIT, FeedbackCounters, HarqProcess,
                   RecoveryController, aggregate_cqi, common_channel_detect,
                   group_decision, nack_detection_threshold)  # noqa: F401
from .link2sys import bler, default_mcs_table, load_mcs_table, select_mcs, transport_block_size
from .metrics import MetricsRecord, SessionRow, export_run
from .scheduler import (AllocEntry, BackgroundLoad, FrameJob, TdMinCqiGate,
                        bg_subband_mask, calibrate_fixed_ptm, cqi_preference_order,
                        drop_stale, mbms_band_width, ptp_weight, select_ptp_assignment)
from .traffic import PlayoutState, draw_lifetime, evaluate_satisfaction


class EngineInvariantError(RuntimeError):
    """Internal invariant violation, stamped with the TTI where it happened."""


class _Ue:
    __slots__ = ("ue_id", "slot", "cell", "join_s", "lifetime_s", "first_frame",
                 "frame_phase", "playout", "queue", "retx", "frames", "decode_rng",
                 "feedback_rng", "heading_rng", "spawn_tti")

    def __init__(self, ue_id, slot, cell, join_s, lifetime_s, first_frame, frame_phase,
                 playout, decode_rng, feedback_rng, heading_rng, spawn_tti):
        self.ue_id = ue_id
        self.slot = slot
        self.cell = cell
        self.join_s = join_s
        self.lifetime_s = lifetime_s
        self.first_frame = first_frame
        self.frame_phase = frame_phase
        self.playout = playout
        self.queue = deque()      # PTP frame jobs
        self.retx = deque()       # PTP processes awaiting retransmission
        self.frames = {}          # frame_id -> _FrameProgress (PTP)
        self.decode_rng = decode_rng
        self.feedback_rng = feedback_rng
        self.heading_rng = heading_rng
        self.spawn_tti = spawn_tti


class _FrameProgress:
    """Delivery progress of one video frame toward its audience."""

    __slots__ = ("created_s", "chunks_made", "total", "done", "failed", "procs")

    def __init__(self, created_s):
        self.created_s = created_s
        self.chunks_made = 0
        self.total = None          # known once the frame is fully chunked
        self.done = {}             # ue_id -> decoded chunk count
        self.failed = set()        # ue_ids with a finally-failed chunk
        self.procs = []


class _Cell:
    __slots__ = ("cell_id", "members", "mbms_queue", "retx", "inflight", "frames",
                 "recovery", "frame_dirty", "recovery_seen", "bg", "common_rng",
                 "fixed_sched", "gated_ttis", "work_ttis")

    def __init__(self, cell_id, bg, common_rng, recovery):
        self.cell_id = cell_id
        self.members = []          # _Ue, kept in ue_id order
        self.mbms_queue = deque()
        self.retx = deque()        # multicast processes awaiting retransmission
        self.inflight = 0
        self.frames = {}           # frame_id -> _FrameProgress
        self.recovery = recovery
        self.frame_dirty = set()   # frames with a recorded new-data NACK
        self.recovery_seen = set() # members the recovery controller has served
        self.bg = bg
        self.common_rng = common_rng
        self.fixed_sched = deque() # (process, copy_index) for blind repetition
        self.gated_ttis = 0
        self.work_ttis = 0


@dataclass
class RunResult:
    record: MetricsRecord
    sessions: list
    worst_samples: np.ndarray
    single_samples: np.ndarray
    out_dir: str | None = None


@dataclass
class _Counters:
    mbms_watts: float = 0.0
    per_user_watts: float = 0.0
    per_user_samples: int = 0
    attempts_sum: int = 0
    attempts_blocks: int = 0
    max_attempts: int = 0
    rate_bits: float = 0.0
    rate_ttis: int = 0
    fb: FeedbackCounters = field(default_factory=FeedbackCounters)
    used_subband_ttis: int = 0
    sessions_done: int = 0
    violations: int = 0


class Engine:
    def __init__(self, config: SimulationConfig):
        self.cfg = config.validate()
        cfg = self.cfg
        self.geom = build_layout(cfg)
        self.table = (load_mcs_table(cfg.mcs_table_file, cfg.mi_alpha, cfg.bler_slope,
                                     cfg.cqi_point_quantile)
                      if cfg.mcs_table_file else
                      default_mcs_table(cfg.mi_alpha, cfg.bler_slope, cfg.mi_threshold_scale,
                                        cfg.cqi_point_quantile))
        # multicast aggregate selection runs at its own (hotter) operating point
        # so the group tracks the 10% worst-user target instead of stacking the
        # per-user quantization margin on top of the min aggregation
        self.mbms_table = (load_mcs_table(cfg.mcs_table_file, cfg.mi_alpha, cfg.bler_slope,
                                          cfg.mbms_cqi_point_quantile)
                           if cfg.mcs_table_file else
                           default_mcs_table(cfg.mi_alpha, cfg.bler_slope,
                                             cfg.mi_threshold_scale,
                                             cfg.mbms_cqi_point_quantile))
        self.streams = rngmod.RngStreams(cfg.seed)
        self.S = cfg.n_subbands
        self.U = cfg.population
        self.noise = cfg.noise_per_subband_w
        self.p_sub = cfg.subband_power_w
        self.proj = subband_projection(self.S, cfg.subband_hz)
        self.grid_dt = cfg.fading_grid_ttis * 1e-3
        self.n_taps = len(tu6_tap_powers())
        self.tap_amp = np.sqrt(tu6_tap_powers() / cfg.fading_sinusoids).astype(np.complex64)

        U, C, S = self.U, N_CELLS, self.S
        nsin = cfg.fading_sinusoids
        self.pos = np.zeros((U, 2))
        self.heading = np.zeros(U)
        self.shadow = np.zeros((U, len(self.geom.sites)))
        self.large_db = np.zeros((U, C))
        self.large_lin = np.zeros((U, C), dtype=np.float32)
        self.serving = np.zeros(U, dtype=np.int64)
        self.z = np.zeros((U, C, self.n_taps, nsin), dtype=np.complex64)
        self.rot = np.ones((U, C, self.n_taps, nsin), dtype=np.complex64)
        self.gains_pow = np.zeros((U, C, S), dtype=np.float32)
        self.reports = np.zeros((U, S), dtype=np.int16)
        self.report_tti = np.full(U, -(10 ** 9), dtype=np.int64)
        self.quality_db = np.zeros(U)
        self.qnorm = np.zeros(U)
        self.wake = np.full(U, np.inf)

        self.eff_of_cqi = np.concatenate([[0.0], self.table.eff])  # CQI value -> efficiency
        self.ues: list = [None] * U
        self.ue_by_id: dict[int, _Ue] = {}
        self.next_ue_id = 0
        self.depart_wheel: dict[int, list] = {}    # tti -> [(slot, ue_id)]
        self.heading_wheel: dict[int, list] = {}   # tti -> [(slot, ue_id)]
        self.fb_wheel: dict[int, list] = {}        # tti -> [(cell_id, process)]
        # the network is assumed already running at t=0: interference state
        # starts at the load target instead of an empty (interference-free) grid
        self.act_prev = np.full((C, S), cfg.load_target, dtype=np.float32)
        self.act_accum = np.zeros((C, S), dtype=np.float32)  # interference averaging
        self.act_accum_n = 0
        self.next_tb_id = 0
        self._bit_cols = np.arange(S, dtype=np.int64)

        self.frame_buckets = [[] for _ in range(cfg.frame_interval_ttis)]
        self.gate = TdMinCqiGate(cfg.td_mincqi_percentile) if cfg.mode == "ptm-adaptive-mincqi" else None
        self.scheme = cfg.scheme()
        # detection budget = cell-edge pathloss plus a shadowing margin, so the
        # threshold stays "sufficiently low" for the (shadow-biased) NACK senders
        edge_pl = (cfg.pathloss_a_db + cfg.pathloss_b_db * math.log10(cfg.cell_radius_m)
                   + cfg.nack_budget_margin_db)
        self.nack_threshold = nack_detection_threshold(
            cfg.ue_uplink_power_w, edge_pl, cfg.max_antenna_gain_db, cfg.nack_miss_budget)
        # open-loop uplink power control: senders aim at the cell-edge receive
        # level; users beyond the link budget fall short (honest miss excess)
        self.nack_rx_target = cfg.ue_uplink_power_w * 10.0 ** (
            (cfg.max_antenna_gain_db - edge_pl + cfg.nack_budget_margin_db) / 10.0)

        self.fixed_plan = None
        if cfg.mode == "ptm-fixed":
            self.fixed_plan = calibrate_fixed_ptm(cfg, self.table, cfg.calibration_cache or None)

        self.cells: list[_Cell] = []
        for c in range(C):
            recovery = (RecoveryController(self.table, cfg.mcs_safety_step,
                                           cfg.recovery_window, cfg.recovery_k_max)
                        if self.scheme == "nack_oriented" and cfg.mode != "ptp" else None)
            bg = BackgroundLoad(S, cfg.load_target, cfg.bg_ctrl_gain, cfg.bg_window_ttis)
            self.cells.append(_Cell(c, bg, self.streams.cell(rngmod.COMMON_CHANNEL, c), recovery))

        self.counters = _Counters()
        self.sessions: list[SessionRow] = []
        self._worst_pool: list[np.ndarray] = []
        self._single_pool: list[np.ndarray] = []
        self.measured_ttis_done = 0
        self._shuffle = (np.random.Generator(np.random.PCG64(cfg.debug_shuffle_members))
                         if cfg.debug_shuffle_members else None)

    # ------------------------------------------------------------------ setup

    def _spawn_ue(self, slot: int, tti: int) -> _Ue:
        cfg = self.cfg
        ue_id = self.next_ue_id
        self.next_ue_id += 1
        place = self.streams.ue(rngmod.PLACEMENT, ue_id)
        pos = spawn_position(place, self.geom)
        self.pos[slot] = pos.xy
        self.heading[slot] = pos.heading
        self.shadow[slot] = draw_shadowing(self.streams.ue(rngmod.SHADOWING, ue_id),
                                           len(self.geom.sites), cfg.shadow_sigma_db,
                                           cfg.shadow_site_corr)
        g = large_scale_gain_db(self.pos[slot], self.geom, self.shadow[slot], cfg)
        self.large_db[slot] = g
        self.large_lin[slot] = (10.0 ** (g / 10.0)).astype(np.float32)
        serving = int(np.argmax(g))
        self.serving[slot] = serving

        frng = self.streams.ue(rngmod.FADING, ue_id)
        nsin = cfg.fading_sinusoids
        angles = frng.uniform(0.0, 2.0 * math.pi, size=(N_CELLS, self.n_taps, nsin))
        omega = 2.0 * math.pi * cfg.doppler_hz * np.cos(angles)
        phase0 = frng.uniform(0.0, 2.0 * math.pi, size=(N_CELLS, self.n_taps, nsin))
        t_now = tti * 1e-3
        self.z[slot] = np.exp(1j * (omega * t_now + phase0)).astype(np.complex64)
        self.rot[slot] = np.exp(1j * omega * self.grid_dt).astype(np.complex64)

        now = tti * 1e-3
        lifetime = draw_lifetime(self.streams.ue(rngmod.LIFETIME, ue_id), cfg.mean_lifetime_s)
        interval = cfg.frame_interval_ttis
        interval_s = interval * 1e-3
        # stream delivery phase: per cell for multicast, per user for unicast,
        # so transmissions are not phase-locked across the network
        if cfg.mode == "ptp":
            phase = (ue_id * 37) % interval
        else:
            phase = (serving * interval) // N_CELLS
        first_frame = math.ceil((tti - phase) / interval - 1e-9)
        playout = PlayoutState(now, interval_s, cfg.stall_budget_s)
        ue = _Ue(ue_id, slot, serving, now, lifetime, first_frame, phase, playout,
                 self.streams.ue(rngmod.DECODE, ue_id),
                 self.streams.ue(rngmod.FEEDBACK, ue_id),
                 self.streams.ue(rngmod.HEADING, ue_id), tti)
        self.ues[slot] = ue
        self.ue_by_id[ue_id] = ue
        self.report_tti[slot] = -(10 ** 9)
        self.wake[slot] = np.inf
        self.cells[serving].members.append(ue)  # ids are monotone: list stays sorted
        if cfg.mode == "ptp":
            self.frame_buckets[phase].append((slot, ue_id))

        depart_tti = tti + max(1, int(round(lifetime * 1000.0)))
        self.depart_wheel.setdefault(depart_tti, []).append((slot, ue_id))
        head_tti = tti + int(round(cfg.heading_period_s * 1000.0))
        self.heading_wheel.setdefault(head_tti, []).append((slot, ue_id))
        return ue

    # ------------------------------------------------------------- churn/move

    def _depart(self, slot: int, tti: int, truncated: bool, respawn: bool = True):
        ue = self.ues[slot]
        now = tti * 1e-3
        ue.playout.end_session(now)
        verdict = evaluate_satisfaction(ue.playout, self.cfg.playout_wait_budget_s,
                                        self.cfg.stall_budget_s, self.cfg.loss_tolerance)
        # evaluated sessions must live entirely inside the measured window
        if ue.spawn_tti >= self.cfg.warmup_ttis and verdict.frames_counted > 0:
            self.sessions.append(SessionRow(
                ue.ue_id, ue.spawn_tti, tti, ue.cell, verdict.initial_wait_s,
                verdict.stall_s, verdict.loss_rate, verdict.satisfied, verdict.reason,
                truncated))
            self.counters.sessions_done += 1
        cell = self.cells[ue.cell]
        cell.members.remove(ue)
        cell.recovery_seen.discard(ue.ue_id)
        for fr in cell.frames.values():
            fr.done.pop(ue.ue_id, None)
            fr.failed.discard(ue.ue_id)
            for p in fr.procs:
                p.drop_ue(ue.ue_id)
        for fr in ue.frames.values():
            for p in fr.procs:
                p.closed = True
                p.canceled = True
        ue.retx.clear()
        self.ues[slot] = None
        del self.ue_by_id[ue.ue_id]
        if respawn:
            self._spawn_ue(slot, tti)

    def _step_churn_mobility(self, tti: int):
        for slot, ue_id in self.depart_wheel.pop(tti, ()):
            ue = self.ues[slot]
            if ue is not None and ue.ue_id == ue_id:
                self._depart(slot, tti, truncated=False)
        for slot, ue_id in self.heading_wheel.pop(tti, ()):
            ue = self.ues[slot]
            if ue is None or ue.ue_id != ue_id:
                continue
            self.heading[slot] = ue.heading_rng.uniform(0.0, 2.0 * math.pi)
            self.heading_wheel.setdefault(
                tti + int(round(self.cfg.heading_period_s * 1000.0)), []).append((slot, ue_id))
        v_dt = self.cfg.ue_speed_ms * 1e-3
        if v_dt > 0.0:
            self.pos[:, 0] += v_dt * np.cos(self.heading)
            self.pos[:, 1] += v_dt * np.sin(self.heading)
        if tti and tti % self.cfg.largescale_period_ttis == 0:
            self._refresh_large_scale()

    def _refresh_large_scale(self):
        self.pos = rewrap_many(self.pos, self.geom)
        geom, cfg = self.geom, self.cfg
        delta = self.pos[:, None, :] - geom.cell_xy[None, :, :]          # (U, C, 2)
        cands = delta[:, :, None, :] - geom.translations[None, None]     # (U, C, 7, 2)
        d2 = np.sum(cands * cands, axis=-1)
        idx = np.argmin(d2, axis=-1)
        best = np.take_along_axis(cands, idx[..., None, None], axis=2)[:, :, 0, :]
        dist = np.maximum(np.hypot(best[..., 0], best[..., 1]), 1.0)
        theta = np.degrees(np.arctan2(best[..., 1], best[..., 0]))
        dtheta = np.abs((theta - geom.cell_azimuth_deg[None, :] + 180.0) % 360.0 - 180.0)
        ant = geom.max_antenna_gain_db - np.minimum(
            12.0 * (dtheta / geom.theta3db_deg) ** 2, geom.backoff_db)
        pl = cfg.pathloss_a_db + cfg.pathloss_b_db * np.log10(dist)
        g = ant - pl + self.shadow[:, geom.cell_site]
        self.large_db = g
        self.large_lin = (10.0 ** (g / 10.0)).astype(np.float32)

    # ----------------------------------------------------------- fading grid

    def _step_fading_grid(self, tti: int, measured: bool):
        if tti > 0:
            np.multiply(self.z, self.rot, out=self.z)
        taps = self.z.sum(axis=3)
        taps *= self.tap_amp[None, None, :]
        h = taps @ self.proj                                  # (U, C, S) complex64
        fpow = h.real.astype(np.float32) ** 2 + h.imag.astype(np.float32) ** 2
        self.gains_pow = fpow * self.large_lin[:, :, None]

        # reception conditions integrate interference over the reporting period
        if self.act_accum_n:
            act = self.act_accum / self.act_accum_n
            self.act_accum[:] = 0.0
            self.act_accum_n = 0
        else:
            act = self.act_prev
        ar = np.arange(self.U)
        sig = self.p_sub * self.gains_pow[ar, self.serving, :]
        tot = self.p_sub * np.einsum("ucs,cs->us", self.gains_pow, act, optimize=True)
        own = sig * act[self.serving, :]
        sinr = sig / (tot - own + self.noise)
        self.reports = np.searchsorted(
            self.table.cqi_floor_sinr, sinr.ravel(), side="right"
        ).reshape(self.U, self.S).astype(np.int16)
        self.report_tti[:] = tti
        mean_lin = sinr.mean(axis=1, dtype=np.float64)
        self.quality_db = 10.0 * np.log10(np.maximum(mean_lin / self.cfg.tx_power_w, 1e-30))
        self.qnorm = self.eff_of_cqi[self.reports].mean(axis=1) / self.table.eff[-1]

        if self.gate is not None and self.gate.threshold is None:
            self.gate.add_samples(self.quality_db)
        if measured:
            slots = [ue.slot for cell in self.cells for ue in cell.members]
            self._single_pool.append(self.quality_db[np.array(slots, dtype=np.int64)].copy())
            worst = [min(self.quality_db[u.slot] for u in cell.members)
                     for cell in self.cells if cell.members]
            self._worst_pool.append(np.array(worst))

    # ------------------------------------------------------------- feedback

    def _process_feedback(self, tti: int, measured: bool):
        cfg = self.cfg
        for cell_id, proc in self.fb_wheel.pop(tti, ()):
            if proc.closed:
                continue
            cell = self.cells[cell_id]
            live = [(u, self.ue_by_id.get(u)) for u in sorted(proc.ue_done)]
            live = [(u, ue) for u, ue in live if ue is not None and ue.cell == cell_id]
            if not live:
                self._close_process(cell, proc, tti, measured)
                continue
            n_senders = 0
            nack_detected = False
            attached = []
            if self.scheme == "ack_nack_periodic_cqi":
                for u, ue in live:
                    kind = ACK if proc.ue_done[u] else NACK
                    if ue.feedback_rng.random() < cfg.feedback_error_prob:
                        kind = NACK if kind == ACK else ACK
                    if kind == NACK:
                        nack_detected = True
                if measured:
                    self.counters.fb.harq_sent += len(live)
            else:
                senders = [(u, ue) for u, ue in live if not proc.ue_done[u]]
                n_senders = len(senders)
                if measured:
                    self.counters.fb.harq_sent += n_senders
                    if self.scheme == "nack_oriented":
                        self.counters.fb.cqi_sent += n_senders
                crng = cell.common_rng
                if n_senders:
                    # power-controlled mean receive level times an independent
                    # per-attempt Rayleigh power (uplink fast fading)
                    powers = [min(cfg.ue_uplink_power_w * float(self.large_lin[ue.slot, cell_id]),
                                  self.nack_rx_target) * crng.exponential()
                              for _, ue in senders]
                    nack_detected = common_channel_detect(powers, crng, self.nack_threshold)
                    if nack_detected and self.scheme == "nack_oriented":
                        attached = [self.reports[ue.slot].astype(np.int64)
                                    for _, ue in senders]
                else:
                    nack_detected = crng.random() < cfg.spurious_nack_prob

            decision = group_decision(proc, nack_detected, cfg.max_harq_tx)
            if decision == RETRANSMIT:
                if cell.recovery is not None:
                    # one recovery-window outcome per video frame of new data
                    first_of_frame = (proc.attempt_count == 1
                                      and proc.frame_id not in cell.frame_dirty)
                    if first_of_frame:
                        cell.frame_dirty.add(proc.frame_id)
                    if attached:
                        anchor, _ = select_mcs(aggregate_cqi(attached), self.mbms_table)
                        cell.recovery.on_nack_adapt(anchor.index, first_of_frame)
                    elif n_senders == 0:
                        cell.recovery.on_spurious_nack(first_of_frame)
                if proc.ptp_owner >= 0:
                    owner = self.ue_by_id.get(proc.ptp_owner)
                    if owner is not None and owner.cell == cell_id:
                        owner.retx.append(proc)
                    else:
                        self._close_process(cell, proc, tti, measured, canceled=True)
                else:
                    cell.retx.append(proc)
            else:
                self._close_process(cell, proc, tti, measured)

    def _close_process(self, cell: _Cell, proc: HarqProcess, tti: int, measured: bool,
                       canceled: bool = False):
        if proc.closed:
            return
        proc.closed = True
        proc.canceled = canceled
        if proc.ptp_owner < 0:
            cell.inflight = max(0, cell.inflight - 1)
        if proc.canceled:
            return
        if measured:
            self.counters.attempts_sum += proc.attempt_count
            self.counters.attempts_blocks += 1
            if proc.attempt_count > self.counters.max_attempts:
                self.counters.max_attempts = proc.attempt_count
        now = tti * 1e-3
        fr = self._frame_progress(cell, proc)
        if fr is not None:
            for u, done in proc.ue_done.items():
                if not done and u not in fr.failed:
                    fr.failed.add(u)
                    ue = self.ue_by_id.get(u)
                    if ue is not None:
                        self._frame_lost(ue, proc.frame_id, now)
            self._finish_frame_if_done(cell, proc)

    def _frame_progress(self, cell: _Cell, proc: HarqProcess):
        if proc.ptp_owner >= 0:
            ue = self.ue_by_id.get(proc.ptp_owner)
            return None if ue is None else ue.frames.get(proc.frame_id)
        return cell.frames.get(proc.frame_id)

    def _finish_frame_if_done(self, cell: _Cell, proc: HarqProcess):
        fr = self._frame_progress(cell, proc)
        if fr is None or fr.total is None:
            return
        if any(not p.closed for p in fr.procs):
            return
        if proc.ptp_owner >= 0:
            ue = self.ue_by_id.get(proc.ptp_owner)
            if ue is not None:
                ue.frames.pop(proc.frame_id, None)
        else:
            cell.frames.pop(proc.frame_id, None)
            if cell.recovery is not None:
                if proc.frame_id in cell.frame_dirty:
                    cell.frame_dirty.discard(proc.frame_id)
                else:
                    cell.recovery.on_new_data_success()

    # ------------------------------------------------------------ scheduling

    def _schedule_tti(self, tti: int, measured: bool):
        cfg = self.cfg
        now = tti * 1e-3
        entries_all = []
        cell_masks = np.zeros(N_CELLS, dtype=np.int64)
        for cell in self.cells:
            entries: list[AllocEntry] = []
            if cfg.mode == "ptp":
                self._schedule_ptp(cell, tti, now, entries)
            elif cfg.mode == "ptm-fixed":
                self._schedule_fixed(cell, tti, entries)
            else:
                self._schedule_adaptive(cell, tti, entries, measured)

            used_mask = 0
            for e in entries:
                if e.subband_mask & used_mask:
                    raise EngineInvariantError(
                        f"tti {tti}: subband double-booked in cell {cell.cell_id}")
                used_mask |= e.subband_mask
            real_used = bin(used_mask).count("1")
            fill = cell.bg.fill_count(real_used)
            if fill > 0:
                mask = bg_subband_mask(fill, ~used_mask & ((1 << self.S) - 1), self.S,
                                       (cell.cell_id * 7) % self.S)
                if mask & used_mask:
                    raise EngineInvariantError(
                        f"tti {tti}: background overlaps real flows in cell {cell.cell_id}")
                used_mask |= mask
                entries.append(AllocEntry("bg", -1, mask, None, -1, False))
            total_used = bin(used_mask).count("1")
            cell.bg.record(total_used)
            if measured:
                self.counters.used_subband_ttis += total_used
            cell_masks[cell.cell_id] = used_mask
            entries_all.append(entries)
        act_new = (((cell_masks[:, None] >> self._bit_cols[None, :]) & 1)).astype(np.float32)
        return entries_all, act_new

    def _fresh_reports(self, cell: _Cell, tti: int):
        horizon = tti - self.cfg.stale_cqi_ttis
        return [self.reports[ue.slot].astype(np.int64) for ue in cell.members
                if self.report_tti[ue.slot] >= horizon]

    def _gate_blocked(self, cell: _Cell) -> bool:
        if self.gate is None or self.gate.threshold is None or not cell.members:
            return False
        worst = min(float(self.quality_db[ue.slot]) for ue in cell.members)
        return not self.gate.allowed(worst)

    def _schedule_adaptive(self, cell: _Cell, tti: int, entries, measured: bool):
        cfg = self.cfg
        self._drop_stale_mbms(cell, tti)
        if not (cell.retx or cell.mbms_queue):
            return
        if measured:
            cell.work_ttis += 1
        if self._gate_blocked(cell):
            # deadline pressure overrides the gate: streaming cannot defer a
            # frame past its playout budget just because one user is in a dip
            now = tti * 1e-3
            oldest = 0.0
            if cell.mbms_queue:
                oldest = now - cell.mbms_queue[0].created_s
            for p in cell.retx:
                if not p.closed:
                    oldest = max(oldest, now - p.frame_created_s)
                    break
            if oldest <= cfg.gate_max_defer_s:
                if measured:
                    cell.gated_ttis += 1
                return
        while cell.retx:
            proc = cell.retx.popleft()
            if proc.closed:
                continue
            entries.append(AllocEntry("mbms", -1, proc.subband_mask, proc.subbands,
                                      proc.mcs.index, True, proc))
            return
        if not cell.mbms_queue or cell.inflight >= cfg.max_harq_tx:
            return
        job = cell.mbms_queue[0]
        fr = cell.frames[job.frame_id]
        audience = [ue for ue in cell.members
                    if ue.first_frame <= job.frame_id and ue.ue_id not in fr.failed]
        if not audience:
            cell.mbms_queue.popleft()
            fr.total = fr.chunks_made
            if not any(not p.closed for p in fr.procs):
                cell.frames.pop(job.frame_id, None)
            return
        if cell.recovery is not None:
            # members not yet served restart the blind adaptation from full
            # robustness (the counting procedure tells the eNodeB they joined)
            fresh_ids = {ue.ue_id for ue in audience} - cell.recovery_seen
            if fresh_ids:
                cell.recovery.on_member_join()
                cell.recovery_seen.update(fresh_ids)
            # no periodic CQI: MCS from the recovery controller, band anchored low
            entry = self.table.entries[cell.recovery.current_index]
            width = mbms_band_width(entry.spectral_efficiency, cfg.frame_bits,
                                    cfg.mbms_target_tbs_per_frame, self.S)
            subbands = np.arange(width)
        else:
            reports = self._fresh_reports(cell, tti)
            if not reports:
                return
            agg = aggregate_cqi(reports)
            order = cqi_preference_order(agg)
            entry, _ = select_mcs(agg, self.mbms_table)
            # the group band is the aggregate's best-w subbands, with the MCS
            # re-selected on exactly that set (width and MCS iterate once)
            width = mbms_band_width(entry.spectral_efficiency, cfg.frame_bits,
                                    cfg.mbms_target_tbs_per_frame, self.S)
            entry, _ = select_mcs(agg[order[:width]], self.mbms_table)
            width = mbms_band_width(entry.spectral_efficiency, cfg.frame_bits,
                                    cfg.mbms_target_tbs_per_frame, self.S)
            subbands = np.sort(order[:width])
        tb_bits = transport_block_size(entry, len(subbands))
        proc = self._new_mbms_process(cell, entry, subbands, tb_bits, job, tti, audience)
        cell.inflight += 1
        entries.append(AllocEntry("mbms", -1, proc.subband_mask, proc.subbands,
                                  entry.index, False, proc))

    def _new_mbms_process(self, cell: _Cell, entry, subbands: np.ndarray, tb_bits: int,
                          job: FrameJob, tti: int, audience) -> HarqProcess:
        fr = cell.frames[job.frame_id]
        chunk = min(tb_bits, job.remaining_bits)
        job.remaining_bits -= chunk
        fr.chunks_made += 1
        if job.remaining_bits <= 0:
            cell.mbms_queue.popleft()
            fr.total = fr.chunks_made
        mask = int(np.sum(1 << subbands.astype(np.int64)))
        proc = HarqProcess(self.next_tb_id, cell.cell_id, entry, mask, subbands,
                           tb_bits, [(job.frame_id, chunk)], tti, frame_id=job.frame_id,
                           frame_created_s=job.created_s)
        self.next_tb_id += 1
        aud = list(audience)
        if self._shuffle is not None:
            self._shuffle.shuffle(aud)
        proc.add_audience([ue.ue_id for ue in aud])
        for ue in aud:
            fr.done.setdefault(ue.ue_id, 0)
        fr.procs.append(proc)
        return proc

    def _schedule_fixed(self, cell: _Cell, tti: int, entries):
        cfg = self.cfg
        plan = self.fixed_plan
        entry = self.table.entries[plan.mcs_index]
        tb_bits = transport_block_size(entry, plan.width)
        while cell.mbms_queue:
            job = cell.mbms_queue[0]
            audience = [ue for ue in cell.members if ue.first_frame <= job.frame_id]
            procs = []
            while job.remaining_bits > 0:
                procs.append(self._new_mbms_process(cell, entry, np.arange(plan.width),
                                                    tb_bits, job, tti, audience))
                cell.inflight += 1
            for copy in range(cfg.ptm_fixed_tx_count):
                for p in procs:
                    cell.fixed_sched.append((p, copy))
        while cell.fixed_sched:
            proc, copy = cell.fixed_sched.popleft()
            if proc.closed:
                continue
            entries.append(AllocEntry("mbms", -1, proc.subband_mask, proc.subbands,
                                      proc.mcs.index, copy > 0, proc))
            return

    def _schedule_ptp(self, cell: _Cell, tti: int, now: float, entries):
        cfg = self.cfg
        used_mask = 0
        got_tb = set()
        full = (1 << self.S) - 1

        def weight(ue):
            age = now - ue.queue[0].created_s if ue.queue else 0.0
            return ptp_weight(float(self.qnorm[ue.slot]), age, cfg.ptp_age_beta,
                              cfg.ptp_age_ref_s)

        retx_cands = []
        new_cands = []
        for ue in cell.members:
            for job in drop_stale(ue.queue, now, cfg.drop_deadline_s):
                self._ptp_drop_frame(ue, job, now)
            while ue.retx and ue.retx[0].closed:
                ue.retx.popleft()
            if ue.retx:
                retx_cands.append(ue)
            elif ue.queue:   # new data waits until pending retransmissions go out
                new_cands.append(ue)

        for ue in sorted(retx_cands, key=lambda u: (-weight(u), u.ue_id)):
            if used_mask == full:
                break
            proc = ue.retx[0]
            report = self.reports[ue.slot]
            order = cqi_preference_order(report)
            free_order = order[((used_mask >> order) & 1) == 0]
            w = len(proc.subbands)
            if len(free_order) < w:
                continue
            ue.retx.popleft()
            subs = np.sort(free_order[:w])
            mask = int(np.sum(1 << subs.astype(np.int64)))
            proc.subbands = subs
            proc.subband_mask = mask
            entries.append(AllocEntry("ptp", ue.ue_id, mask, subs, proc.mcs.index,
                                      True, proc))
            used_mask |= mask
            got_tb.add(ue.ue_id)

        for ue in sorted(new_cands, key=lambda u: (-weight(u), u.ue_id)):
            if used_mask == full:
                break
            if ue.ue_id in got_tb:
                continue
            report = self.reports[ue.slot]
            order = cqi_preference_order(report)
            free_order = order[((used_mask >> order) & 1) == 0]
            job = ue.queue[0]
            chunk_target = min(job.remaining_bits,
                               -(-cfg.frame_bits // cfg.ptp_target_tbs_per_frame))
            pick = select_ptp_assignment(report, free_order, chunk_target, self.table)
            if pick is None:
                continue
            subs, m_idx, tb_bits = pick
            entry = self.table.entries[m_idx]
            fr = ue.frames[job.frame_id]
            chunk = min(tb_bits, job.remaining_bits)
            job.remaining_bits -= chunk
            fr.chunks_made += 1
            if job.remaining_bits <= 0:
                ue.queue.popleft()
                fr.total = fr.chunks_made
            subs = np.sort(subs)
            mask = int(np.sum(1 << subs.astype(np.int64)))
            proc = HarqProcess(self.next_tb_id, cell.cell_id, entry, mask, subs, tb_bits,
                               [(job.frame_id, chunk)], tti, frame_id=job.frame_id,
                               ptp_owner=ue.ue_id)
            self.next_tb_id += 1
            proc.add_audience([ue.ue_id])
            fr.done.setdefault(ue.ue_id, 0)
            fr.procs.append(proc)
            entries.append(AllocEntry("ptp", ue.ue_id, mask, subs, m_idx, False, proc))
            used_mask |= mask
            got_tb.add(ue.ue_id)

    def _drop_stale_mbms(self, cell: _Cell, tti: int):
        now = tti * 1e-3
        for job in drop_stale(cell.mbms_queue, now, self.cfg.drop_deadline_s):
            fr = cell.frames.get(job.frame_id)
            if fr is None:
                continue
            fr.total = fr.chunks_made  # whatever was never chunked is gone
            for p in fr.procs:
                if not p.closed:
                    self._close_process(cell, p, tti, False, canceled=True)
            for ue in cell.members:
                if ue.first_frame <= job.frame_id and ue.ue_id not in fr.failed:
                    fr.failed.add(ue.ue_id)
                    self._frame_lost(ue, job.frame_id, now)
            cell.frames.pop(job.frame_id, None)

    def _ptp_drop_frame(self, ue: _Ue, job: FrameJob, now: float):
        fr = ue.frames.get(job.frame_id)
        if fr is None:
            return
        for p in fr.procs:
            p.closed = True
            p.canceled = True
        if ue.ue_id not in fr.failed:
            fr.failed.add(ue.ue_id)
            self._frame_lost(ue, job.frame_id, now)
        ue.frames.pop(job.frame_id, None)

    # ------------------------------------------------------------ decode/TX

    def _transmit(self, entries_all, tti: int, measured: bool):
        cfg = self.cfg
        now = tti * 1e-3
        act = self.act_prev
        for cell, entries in zip(self.cells, entries_all):
            c = cell.cell_id
            for e in entries:
                proc = e.process
                if proc is None:
                    continue
                proc.attempt_count += 1
                if proc.attempt_count > cfg.max_harq_tx:
                    raise EngineInvariantError(
                        f"tti {tti}: process {proc.tb_id} exceeded max HARQ attempts")
                proc.last_tx_tti = tti
                if measured:
                    self.counters.rate_bits += proc.tb_bits
                    self.counters.rate_ttis += 1
                pend = [(u, self.ue_by_id.get(u)) for u, d in proc.ue_done.items() if not d]
                pend = [(u, ue) for u, ue in pend if ue is not None]
                if pend:
                    slots = np.array([ue.slot for _, ue in pend], dtype=np.int64)
                    band = proc.subbands
                    g = self.gains_pow[slots][:, :, band]            # (A, C, w)
                    actb = act[:, band]
                    tot = self.p_sub * np.einsum("acs,cs->as", g, actb)
                    sig = self.p_sub * g[:, c, :]
                    own = sig * actb[c]
                    sinr = sig / (tot - own + self.noise)
                    mi = np.minimum(cfg.mi_alpha * np.log2(1.0 + sinr),
                                    proc.mcs.modulation_order).mean(axis=1)
                    for (u, ue), mval in zip(pend, mi):
                        acc = min(proc.ue_mi[u] + float(mval),
                                  cfg.ir_cap_factor * proc.mcs.mi_threshold)
                        proc.ue_mi[u] = acc
                        p_fail = float(bler(acc, proc.mcs, self.table.bler_slope))
                        if ue.decode_rng.random() >= p_fail:
                            proc.ue_done[u] = True
                            self._chunk_decoded(cell, ue, proc, now)
                if cfg.mode == "ptm-fixed":
                    if proc.attempt_count >= cfg.ptm_fixed_tx_count:
                        self._close_process(cell, proc, tti, measured)
                else:
                    self.fb_wheel.setdefault(tti + cfg.harq_rtt_ttis, []).append((c, proc))

    def _chunk_decoded(self, cell: _Cell, ue: _Ue, proc: HarqProcess, now: float):
        fr = self._frame_progress(cell, proc)
        if fr is None or ue.ue_id in fr.failed:
            return
        fr.done[ue.ue_id] = fr.done.get(ue.ue_id, 0) + 1
        if fr.total is not None and fr.done[ue.ue_id] >= fr.total:
            rel = proc.frame_id - ue.first_frame
            ue.playout.on_frame_delivered(rel, now)
            self.wake[ue.slot] = ue.playout.next_wake()

    def _frame_lost(self, ue: _Ue, frame_id: int, now: float):
        rel = frame_id - ue.first_frame
        ue.playout.on_frame_lost(rel, now)
        self.wake[ue.slot] = ue.playout.next_wake()

    # -------------------------------------------------------------- traffic

    def _generate_frames(self, tti: int):
        cfg = self.cfg
        interval = cfg.frame_interval_ttis
        now = tti * 1e-3
        if cfg.mode == "ptp":
            bucket = self.frame_buckets[tti % interval]
            live = []
            for slot, ue_id in bucket:
                ue = self.ues[slot]
                if ue is None or ue.ue_id != ue_id:
                    continue
                live.append((slot, ue_id))
                fid = (tti - ue.frame_phase) // interval
                if fid < ue.first_frame:
                    continue
                ue.queue.append(FrameJob(fid, now, cfg.frame_bits))
                ue.frames[fid] = _FrameProgress(now)
                ue.playout.on_frame_generated()
                self.wake[ue.slot] = min(self.wake[ue.slot], ue.playout.next_wake())
            if len(live) != len(bucket):
                self.frame_buckets[tti % interval] = live
            return
        for cell in self.cells:
            phase = (cell.cell_id * interval) // N_CELLS
            if tti % interval != phase:
                continue
            fid = (tti - phase) // interval
            eligible = [ue for ue in cell.members if ue.first_frame <= fid]
            if cfg.mode != "ptm-fixed" and not eligible:
                continue  # adaptive PTM transmits nothing in empty cells
            cell.mbms_queue.append(FrameJob(fid, now, cfg.frame_bits))
            fr = _FrameProgress(now)
            cell.frames[fid] = fr
            for ue in eligible:
                fr.done.setdefault(ue.ue_id, 0)
                ue.playout.on_frame_generated()
                self.wake[ue.slot] = min(self.wake[ue.slot], ue.playout.next_wake())

    def _advance_playout(self, tti: int):
        now = tti * 1e-3
        for slot in np.nonzero(self.wake <= now + 1e-12)[0]:
            ue = self.ues[slot]
            if ue is None:
                self.wake[slot] = np.inf
                continue
            ue.playout.advance(now)
            self.wake[slot] = ue.playout.next_wake()

    # ------------------------------------------------------------------ run

    def run(self, out_dir: str | None = None) -> RunResult:
        cfg = self.cfg
        for slot in range(self.U):
            self._spawn_ue(slot, 0)
        total = cfg.warmup_ttis + cfg.duration_ttis
        tti = 0
        while tti < total:
            measured = tti >= cfg.warmup_ttis
            if measured and tti == cfg.warmup_ttis and self.gate is not None:
                self.gate.calibrate()
            if measured and cfg.sessions_target and \
                    self.counters.sessions_done >= cfg.sessions_target:
                break
            self._step_churn_mobility(tti)
            if tti % cfg.fading_grid_ttis == 0:
                self._step_fading_grid(tti, measured)
            if measured and tti % cfg.cqi_period_ttis == 0 and \
                    self.scheme != "nack_oriented" and cfg.mode != "ptm-fixed":
                self.counters.fb.cqi_sent += self.U  # periodic multiband reports
            self._process_feedback(tti, measured)
            entries_all, act_new = self._schedule_tti(tti, measured)
            self._transmit(entries_all, tti, measured)
            self._generate_frames(tti)
            self._advance_playout(tti)
            if measured:
                self._accrue_power(entries_all)
                self.measured_ttis_done += 1
            self.act_prev = act_new
            self.act_accum += act_new
            self.act_accum_n += 1
            tti += 1

        for slot in range(self.U):
            if self.ues[slot] is not None:
                self._depart(slot, tti, truncated=True, respawn=False)

        record = self._build_record()
        worst = (np.concatenate(self._worst_pool) if self._worst_pool else np.empty(0))
        singles = (np.concatenate(self._single_pool) if self._single_pool else np.empty(0))
        result = RunResult(record, self.sessions, worst, singles, out_dir)
        if out_dir:
            export_run(result, out_dir)
        return result

    def _accrue_power(self, entries_all):
        c = self.counters
        for cell, entries in zip(self.cells, entries_all):
            watts = 0.0
            for e in entries:
                if e.kind != "bg":
                    watts += self.p_sub * len(e.subbands)
            c.mbms_watts += watts
            n = len(cell.members)
            if n:
                c.per_user_watts += watts / n
                c.per_user_samples += 1

    def _build_record(self) -> MetricsRecord:
        cfg = self.cfg
        c = self.counters
        T = max(1, self.measured_ttis_done)
        sat = sum(1 for s in self.sessions if s.satisfied)
        usr = sat / len(self.sessions) if self.sessions else float("nan")
        gated = sum(cl.gated_ttis for cl in self.cells)
        work = sum(cl.work_ttis for cl in self.cells)
        return MetricsRecord(
            mode=cfg.mode,
            users_per_cell=cfg.users_per_cell,
            seed=cfg.seed,
            warmup_ttis=cfg.warmup_ttis,
            measured_ttis=self.measured_ttis_done,
            sessions_evaluated=len(self.sessions),
            usr=usr,
            group_power_w=c.mbms_watts / (N_CELLS * T),
            per_user_power_w=(c.per_user_watts / c.per_user_samples
                              if c.per_user_samples else float("nan")),
            avg_harq_attempts=(c.attempts_sum / c.attempts_blocks
                               if c.attempts_blocks else float("nan")),
            max_harq_attempts=c.max_attempts,
            transmit_rate_kbps=(c.rate_bits / c.rate_ttis if c.rate_ttis else float("nan")),
            harq_feedback_count=c.fb.harq_sent,
            cqi_feedback_count=c.fb.cqi_sent,
            gated_tti_fraction=(gated / work if work else 0.0),
            avg_load=c.used_subband_ttis / (N_CELLS * T * self.S),
            avg_population=float(self.U),
            violations=c.violations,
            fixed_mcs_index=(self.fixed_plan.mcs_index if self.fixed_plan else -1),
            fixed_width=(self.fixed_plan.width if self.fixed_plan else -1),
        )


def run(config: SimulationConfig, out_dir: str | None = None) -> RunResult:
    """Build an engine and execute one full simulation run."""
    return Engine(config).run(out_dir)
