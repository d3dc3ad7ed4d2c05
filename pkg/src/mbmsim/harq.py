"""HARQ processes, feedback generation/detection, CQI aggregation, recovery control."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .link2sys import McsEntry, McsTable, accumulate_ir, bler

ACK = 1
NACK = 2
NONE = 0

RETRANSMIT = "RETRANSMIT"
COMPLETE = "COMPLETE"
EXHAUSTED = "EXHAUSTED"

ADAPTATION = "ADAPTATION"
RECOVERY = "RECOVERY"


@dataclass
class FeedbackEvent:
    ue_id: int
    tti: int
    kind: int                      # ACK | NACK | NONE
    attached_cqi: np.ndarray | None = None
    corrupted: bool = False


@dataclass
class HarqProcess:
    """One transport block and its per-UE soft-combining state."""

    tb_id: int
    cell: int
    mcs: McsEntry
    subband_mask: int              # bitmask over subbands
    subbands: np.ndarray           # indices, ascending
    tb_bits: int
    frame_chunks: list             # [(frame_id, bits)] carried by this TB
    created_tti: int
    frame_id: int = -1
    frame_created_s: float = 0.0
    ptp_owner: int = -1            # owning ue_id for PTP flows, -1 for multicast
    attempt_count: int = 0
    last_tx_tti: int = -1
    ue_mi: dict = field(default_factory=dict)     # ue_id -> accumulated MI
    ue_done: dict = field(default_factory=dict)   # ue_id -> bool
    last_outcomes: dict = field(default_factory=dict)  # ue_id -> success of last attempt
    closed: bool = False
    canceled: bool = False

    def add_audience(self, ue_ids):
        for u in ue_ids:
            if u not in self.ue_done:
                self.ue_mi[u] = 0.0
                self.ue_done[u] = False

    def drop_ue(self, ue_id):
        self.ue_mi.pop(ue_id, None)
        self.ue_done.pop(ue_id, None)
        self.last_outcomes.pop(ue_id, None)

    @property
    def all_done(self) -> bool:
        return all(self.ue_done.values())


def decode_attempt(process: HarqProcess, per_ue_mi: dict, decode_draws: dict,
                   slope: float, cap_factor: float) -> list:
    """Soft-combine this attempt's MI per UE and draw decode outcomes.

    per_ue_mi maps ue_id -> per-symbol MI of this attempt; decode_draws maps
    ue_id -> a U(0,1) draw from that UE's own stream. Already-done UEs are
    untouched. Returns the newly successful ue_ids.
    """
    newly = []
    for ue_id, mi in per_ue_mi.items():
        if process.ue_done.get(ue_id, True):
            continue
        acc = accumulate_ir(process.ue_mi[ue_id], mi, process.mcs, cap_factor)
        process.ue_mi[ue_id] = acc
        p_fail = float(bler(acc, process.mcs, slope))
        ok = decode_draws[ue_id] >= p_fail
        process.last_outcomes[ue_id] = ok
        if ok:
            process.ue_done[ue_id] = True
            newly.append(ue_id)
    return newly


def make_feedback(ue_id: int, tti: int, success: bool, scheme: str,
                  flip_draw: float, error_prob: float,
                  cqi_report: np.ndarray | None = None) -> FeedbackEvent:
    """Per-UE HARQ status feedback under the selected syntax.

    Combined ACK/NACK flips with probability error_prob. Exclusive-NACK schemes
    send nothing on success; the common-channel detector models their corruption.
    NACK-oriented attaches the UE's current multiband CQI to each NACK.
    """
    if scheme == "ack_nack_periodic_cqi":
        kind = ACK if success else NACK
        corrupted = flip_draw < error_prob
        if corrupted:
            kind = NACK if kind == ACK else ACK
        return FeedbackEvent(ue_id, tti, kind, None, corrupted)
    if success:
        return FeedbackEvent(ue_id, tti, NONE)
    attached = cqi_report if scheme == "nack_oriented" else None
    return FeedbackEvent(ue_id, tti, NACK, attached)


def group_decision(process: HarqProcess, nack_detected: bool, max_tx: int) -> str:
    """Multicast retransmission rule: any NACK retransmits until attempts run out."""
    if not nack_detected:
        return COMPLETE
    if process.attempt_count < max_tx:
        return RETRANSMIT
    return EXHAUSTED


def common_channel_detect(uplink_rx_powers_w, rng: np.random.Generator,
                          threshold_w: float, noise_mean_w: float = 0.0) -> bool:
    """Energy detection on the shared NACK resource.

    Senders' phasors superimpose with independent uniform phases, so collisions
    add constructively or destructively; the given powers are the instantaneous
    per-sender receive powers at the detector (fading is the caller's business).
    Detection = total power (plus an exponential noise sample if noise_mean_w
    is positive) above threshold.
    """
    total = 0.0 + 0.0j
    powers = np.atleast_1d(np.asarray(uplink_rx_powers_w, dtype=float))
    if powers.size:
        phases = rng.uniform(0.0, 2.0 * math.pi, powers.size)
        total = np.sum(np.sqrt(powers) * np.exp(1j * phases))
    p = abs(total) ** 2
    if noise_mean_w > 0.0:
        p += rng.exponential(noise_mean_w)
    return bool(p > threshold_w)


def nack_detection_threshold(ue_uplink_power_w: float, edge_pathloss_db: float,
                             max_antenna_gain_db: float, miss_budget: float) -> float:
    """Threshold with single-sender miss probability = miss_budget at the cell edge.

    A Rayleigh-faded sender of mean receive power mu is missed with probability
    1 - exp(-thr/mu); solving for thr keeps the detector reliable for the worst
    in-budget user, hence "sufficiently low".
    """
    mu_edge = ue_uplink_power_w * 10.0 ** ((max_antenna_gain_db - edge_pathloss_db) / 10.0)
    return -math.log(1.0 - miss_budget) * mu_edge


def aggregate_cqi(reports: list[np.ndarray]) -> np.ndarray:
    """Elementwise minimum over the group's freshest per-subband reports."""
    if not reports:
        raise ValueError("no CQI reports to aggregate (no MBMS users)")
    out = np.asarray(reports[0], dtype=np.int64).copy()
    for r in reports[1:]:
        np.minimum(out, r, out=out)
    return out


class RecoveryController:
    """MCS control for the NACK-oriented scheme: adaptation and recovery phases.

    The robustness offset counts table steps below the least robust entry
    (current MCS = top - offset). A CQI-bearing NACK re-anchors the MCS one
    safety step under what the attached aggregate CQI implies; between NACKs
    every K clean new-data blocks blindly reduce the offset by one step, K set
    from the recent success rate.
    """

    def __init__(self, table: McsTable, safety_step: int = 1, window: int = 20,
                 k_max: int = 10):
        self.table = table
        self.safety_step = safety_step
        self.k_max = k_max
        self.offset = table.top_index          # start at the most robust entry
        self.consecutive_success = 0
        self.blocks_since_nack = 10 ** 9
        self.window = deque(maxlen=window)
        self.phase = ADAPTATION

    @property
    def current_index(self) -> int:
        return self.table.top_index - self.offset

    def step_size(self) -> int:
        """Blocks per robustness-reduction step, set by the recent success rate.

        A clean window probes upward quickly; accumulating failures stretch the
        step interval toward k_max, and a window with more than 10% failures
        holds the ride entirely (0 = no recovery step) until it cleans up.
        """
        if not self.window:
            return self.k_max
        fail = 1.0 - sum(self.window) / len(self.window)
        if fail > 0.1 + 1e-9:
            return 0
        return max(1, min(self.k_max, round(self.k_max * fail / 0.1)))

    def on_nack_adapt(self, anchor_index: int, new_data: bool = True):
        """NACK with attached CQI: re-anchor below the reported aggregate.

        The success window tracks one outcome per block, so only a new-data
        NACK records a failure; retransmission NACKs still re-anchor.
        """
        target = max(anchor_index - self.safety_step, 0)
        self.offset = self.table.top_index - target
        self.consecutive_success = 0
        self.blocks_since_nack = 0
        if new_data:
            self.window.append(False)
        self.phase = ADAPTATION

    def on_new_data_success(self):
        self.window.append(True)
        self.consecutive_success += 1
        self.blocks_since_nack += 1
        k = self.step_size()
        # refractory after a NACK: hold at the re-anchored level for a full
        # k_max worth of clean blocks before probing upward again
        if k and self.consecutive_success >= k and self.blocks_since_nack >= self.k_max:
            self.offset = max(0, self.offset - 1)
            self.consecutive_success = 0
            self.phase = RECOVERY

    def on_spurious_nack(self, new_data: bool = True):
        """Detector fired with no CQI attached: no re-anchor, just not a clean block."""
        if new_data:
            self.window.append(False)
        self.consecutive_success = 0

    def on_member_join(self):
        """Group membership grew (counting procedure): restart from full
        robustness; the recovery phase climbs back blindly."""
        self.offset = self.table.top_index
        self.consecutive_success = 0
        self.phase = ADAPTATION


@dataclass
class FeedbackCounters:
    """Uplink transmissions actually sent by UEs (for feedback-volume ratios)."""
    harq_sent: int = 0
    cqi_sent: int = 0
