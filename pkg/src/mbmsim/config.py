"""Simulation configuration: defaults, flat key=value file parsing, validation."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields

MODES = ("ptp", "ptm-fixed", "ptm-adaptive", "ptm-adaptive-mincqi", "ptm-nack-oriented")

FEEDBACK_ACK_NACK = "ack_nack_periodic_cqi"
FEEDBACK_EXCLUSIVE_NACK = "exclusive_nack"
FEEDBACK_NACK_ORIENTED = "nack_oriented"
FEEDBACK_SCHEMES = (FEEDBACK_ACK_NACK, FEEDBACK_EXCLUSIVE_NACK, FEEDBACK_NACK_ORIENTED)

N_SITES = 7
SECTORS_PER_SITE = 3
N_CELLS = N_SITES * SECTORS_PER_SITE

# usable resource elements per subband per TTI: 12 subcarriers x 14 symbols minus
# reference/control overhead
RE_PER_SUBBAND_TTI = 120

THERMAL_NOISE_DBM_HZ = -174.0
SPEED_OF_LIGHT = 2.99792458e8


class ConfigError(ValueError):
    """Raised for unknown keys or out-of-range values, naming the offender."""


def _rng_check(name, value, lo, hi, lo_open=False, hi_open=False):
    bad = False
    if lo is not None and (value < lo or (lo_open and value == lo)):
        bad = True
    if hi is not None and (value > hi or (hi_open and value == hi)):
        bad = True
    if bad:
        lo_s = "-inf" if lo is None else str(lo)
        hi_s = "+inf" if hi is None else str(hi)
        lob = "(" if lo_open else "["
        hib = ")" if hi_open else "]"
        raise ConfigError(f"{name}={value!r} out of range {lob}{lo_s}, {hi_s}{hib}")


@dataclass
class SimulationConfig:
    """Every model parameter plus run controls; single source of truth per run."""

    # run controls
    mode: str = "ptm-adaptive"
    users_per_cell: int = 2
    duration_ttis: int = 60000
    warmup_ttis: int = 2000
    seed: int = 1
    sessions_target: int = 0          # 0 = run for duration_ttis only
    feedback_scheme: str = ""         # empty = default for the mode

    # radio network
    cell_radius_m: float = 500.0
    isd_m: float = 1500.0
    pathloss_a_db: float = 29.03
    pathloss_b_db: float = 35.2
    shadow_sigma_db: float = 8.0
    shadow_site_corr: float = 0.5
    spectrum_mhz: float = 5.0
    subband_hz: float = 180e3
    tx_power_w: float = 20.0
    max_antenna_gain_db: float = 14.0
    antenna_theta3db_deg: float = 70.0
    antenna_backoff_db: float = 20.0
    noise_figure_db: float = 8.0
    carrier_hz: float = 2.0e9

    # UE / mobility
    ue_speed_kmh: float = 3.0
    heading_period_s: float = 5.0

    # fading realization
    fading_sinusoids: int = 32
    fading_grid_ttis: int = 10
    largescale_period_ttis: int = 100

    # link adaptation / HARQ
    cqi_period_ttis: int = 10
    max_harq_tx: int = 8
    harq_rtt_ttis: int = 8
    mi_alpha: float = 0.9
    bler_slope: float = 20.0
    mi_threshold_scale: float = 1.02
    cqi_point_quantile: float = 0.8
    mbms_cqi_point_quantile: float = 0.95
    ir_cap_factor: float = 3.0
    stale_cqi_ttis: int = 100
    mcs_table_file: str = ""

    # feedback channel
    feedback_error_prob: float = 1e-3
    spurious_nack_prob: float = 1e-3
    nack_miss_budget: float = 1e-3
    nack_budget_margin_db: float = 15.0
    ue_uplink_power_w: float = 0.2

    # NACK-oriented recovery
    mcs_safety_step: int = 2
    recovery_window: int = 20
    recovery_k_max: int = 10

    # TD min-CQI gate
    td_mincqi_percentile: float = 5.0
    gate_max_defer_s: float = 0.35

    # scheduling / load
    load_target: float = 0.7
    bg_ctrl_gain: float = 1.0
    bg_window_ttis: int = 100
    ptp_age_beta: float = 1.0
    ptp_age_ref_s: float = 0.25
    drop_deadline_s: float = 1.0
    mbms_target_tbs_per_frame: int = 10
    ptp_target_tbs_per_frame: int = 5
    ptm_fixed_tx_count: int = 5
    calibration_cache: str = ""

    # traffic / QoE
    source_rate_kbps: float = 128.0
    frame_interval_ms: float = 100.0
    playout_wait_budget_s: float = 0.5
    stall_budget_s: float = 0.5
    loss_tolerance: float = 0.01
    mean_lifetime_s: float = 30.0

    # debug
    debug_shuffle_members: int = 0    # nonzero seed: permute member iteration order

    # ---- derived ----

    @property
    def n_subbands(self) -> int:
        # standard numerology: 5 subbands of 180 kHz per MHz of spectrum
        # (25 for 5 MHz; guard bands take the remainder)
        return int(round(self.spectrum_mhz * 5))

    @property
    def subband_power_w(self) -> float:
        return self.tx_power_w / self.n_subbands

    @property
    def ue_speed_ms(self) -> float:
        return self.ue_speed_kmh / 3.6

    @property
    def doppler_hz(self) -> float:
        return self.ue_speed_ms * self.carrier_hz / SPEED_OF_LIGHT

    @property
    def frame_interval_ttis(self) -> int:
        return int(round(self.frame_interval_ms))

    @property
    def frame_bits(self) -> int:
        return int(round(self.source_rate_kbps * self.frame_interval_ms))

    @property
    def population(self) -> int:
        return self.users_per_cell * N_CELLS

    @property
    def noise_per_subband_w(self) -> float:
        n_dbm = THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(self.subband_hz) + self.noise_figure_db
        return 10.0 ** ((n_dbm - 30.0) / 10.0)

    def scheme(self) -> str:
        if self.feedback_scheme:
            return self.feedback_scheme
        if self.mode == "ptm-nack-oriented":
            return FEEDBACK_NACK_ORIENTED
        return FEEDBACK_ACK_NACK

    # ---- validation ----

    def validate(self) -> "SimulationConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode={self.mode!r} not one of {MODES}")
        if self.feedback_scheme and self.feedback_scheme not in FEEDBACK_SCHEMES:
            raise ConfigError(f"feedback_scheme={self.feedback_scheme!r} not one of {FEEDBACK_SCHEMES}")
        _rng_check("users_per_cell", self.users_per_cell, 1, 1000)
        _rng_check("duration_ttis", self.duration_ttis, 0, None)
        _rng_check("warmup_ttis", self.warmup_ttis, 0, None)
        _rng_check("seed", self.seed, 0, None)
        _rng_check("sessions_target", self.sessions_target, 0, None)
        _rng_check("cell_radius_m", self.cell_radius_m, 0, None, lo_open=True)
        _rng_check("isd_m", self.isd_m, 0, None, lo_open=True)
        _rng_check("pathloss_b_db", self.pathloss_b_db, 0, None, lo_open=True)
        _rng_check("shadow_sigma_db", self.shadow_sigma_db, 0, 50)
        _rng_check("shadow_site_corr", self.shadow_site_corr, 0.0, 1.0)
        _rng_check("spectrum_mhz", self.spectrum_mhz, 0, None, lo_open=True)
        _rng_check("subband_hz", self.subband_hz, 0, None, lo_open=True)
        _rng_check("tx_power_w", self.tx_power_w, 0, None, lo_open=True)
        _rng_check("antenna_theta3db_deg", self.antenna_theta3db_deg, 0, None, lo_open=True)
        _rng_check("antenna_backoff_db", self.antenna_backoff_db, 0, None)
        _rng_check("noise_figure_db", self.noise_figure_db, 0, None)
        _rng_check("carrier_hz", self.carrier_hz, 0, None, lo_open=True)
        _rng_check("ue_speed_kmh", self.ue_speed_kmh, 0, None)
        _rng_check("heading_period_s", self.heading_period_s, 0, None, lo_open=True)
        _rng_check("fading_sinusoids", self.fading_sinusoids, 4, 4096)
        _rng_check("fading_grid_ttis", self.fading_grid_ttis, 1, None)
        _rng_check("largescale_period_ttis", self.largescale_period_ttis, 1, None)
        _rng_check("cqi_period_ttis", self.cqi_period_ttis, 1, None)
        _rng_check("max_harq_tx", self.max_harq_tx, 1, 64)
        _rng_check("harq_rtt_ttis", self.harq_rtt_ttis, 1, None)
        _rng_check("mi_alpha", self.mi_alpha, 0.0, 1.0, lo_open=True)
        _rng_check("bler_slope", self.bler_slope, 0, None, lo_open=True)
        _rng_check("mi_threshold_scale", self.mi_threshold_scale, 0, None, lo_open=True)
        _rng_check("cqi_point_quantile", self.cqi_point_quantile, 0.0, 1.0, hi_open=True)
        _rng_check("mbms_cqi_point_quantile", self.mbms_cqi_point_quantile, 0.0, 1.0, hi_open=True)
        _rng_check("ir_cap_factor", self.ir_cap_factor, 1.0, None)
        _rng_check("stale_cqi_ttis", self.stale_cqi_ttis, 1, None)
        _rng_check("feedback_error_prob", self.feedback_error_prob, 0.0, 1.0, hi_open=True)
        _rng_check("spurious_nack_prob", self.spurious_nack_prob, 0.0, 1.0, hi_open=True)
        _rng_check("nack_miss_budget", self.nack_miss_budget, 0.0, 1.0, lo_open=True, hi_open=True)
        _rng_check("nack_budget_margin_db", self.nack_budget_margin_db, 0.0, 60.0)
        _rng_check("ue_uplink_power_w", self.ue_uplink_power_w, 0, None, lo_open=True)
        _rng_check("mcs_safety_step", self.mcs_safety_step, 0, 14)
        _rng_check("recovery_window", self.recovery_window, 1, None)
        _rng_check("recovery_k_max", self.recovery_k_max, 1, None)
        _rng_check("td_mincqi_percentile", self.td_mincqi_percentile, 0.0, 100.0, lo_open=True, hi_open=True)
        _rng_check("gate_max_defer_s", self.gate_max_defer_s, 0.0, None)
        _rng_check("load_target", self.load_target, 0.0, 1.0)
        _rng_check("bg_ctrl_gain", self.bg_ctrl_gain, 0, None)
        _rng_check("bg_window_ttis", self.bg_window_ttis, 1, None)
        _rng_check("ptp_age_beta", self.ptp_age_beta, 0, None)
        _rng_check("ptp_age_ref_s", self.ptp_age_ref_s, 0, None, lo_open=True)
        _rng_check("drop_deadline_s", self.drop_deadline_s, 0, None, lo_open=True)
        _rng_check("mbms_target_tbs_per_frame", self.mbms_target_tbs_per_frame, 1, None)
        _rng_check("ptp_target_tbs_per_frame", self.ptp_target_tbs_per_frame, 1, None)
        _rng_check("ptm_fixed_tx_count", self.ptm_fixed_tx_count, 1, None)
        _rng_check("source_rate_kbps", self.source_rate_kbps, 0, None, lo_open=True)
        _rng_check("frame_interval_ms", self.frame_interval_ms, 1, None)
        _rng_check("playout_wait_budget_s", self.playout_wait_budget_s, 0, None)
        _rng_check("stall_budget_s", self.stall_budget_s, 0, None)
        _rng_check("loss_tolerance", self.loss_tolerance, 0.0, 1.0)
        _rng_check("mean_lifetime_s", self.mean_lifetime_s, 0, None, lo_open=True)
        if self.n_subbands < 1:
            raise ConfigError("spectrum_mhz/subband_hz give zero subbands")
        return self

    # ---- serialization ----

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def run_hash(self) -> str:
        """Hash of the full config; identifies a run's outputs."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def physics_hash(self) -> str:
        """Hash of everything calibration depends on (excludes seeds/modes/run length)."""
        skip = {
            "mode", "seed", "duration_ttis", "warmup_ttis", "users_per_cell",
            "sessions_target", "feedback_scheme", "calibration_cache",
            "debug_shuffle_members",
        }
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self) if f.name not in skip]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(SimulationConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}={raw!r}: cannot parse as {typ}") from exc


def parse_config_text(text: str, base: SimulationConfig | None = None) -> SimulationConfig:
    cfg = dataclasses.replace(base) if base is not None else SimulationConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(key, raw))
    return cfg


def load_config(path: str | None = None, overrides: dict | None = None) -> SimulationConfig:
    """Build a config from an optional file plus CLI-style overrides, then validate."""
    cfg = SimulationConfig()
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(cfg, key, value if not isinstance(value, str) else _coerce(key, value))
    return cfg.validate()
