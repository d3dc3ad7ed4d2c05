"""Radio channel: path loss, shadowing, TU multipath fading, per-subband SINR."""

from __future__ import annotations

import math

import numpy as np

from .config import SimulationConfig
from .geometry import RadioGeometry, antenna_gain_from_angle, wrap_displacement

# 3GPP Typical Urban, 6-tap reduced profile (delay us, power dB)
TU6_DELAYS_US = np.array([0.0, 0.2, 0.5, 1.6, 2.3, 5.0])
TU6_POWERS_DB = np.array([-3.0, 0.0, -2.0, -6.0, -8.0, -10.0])


def tu6_tap_powers() -> np.ndarray:
    """Linear tap powers normalized to unit total (0 dB long-run gain)."""
    p = 10.0 ** (TU6_POWERS_DB / 10.0)
    return p / p.sum()


def path_loss(d) -> np.ndarray:
    """Distance attenuation 29.03 + 35.2*log10(d), d in meters, clamped at 1 m."""
    d = np.maximum(np.asarray(d, dtype=float), 1.0)
    return 29.03 + 35.2 * np.log10(d)


def path_loss_cfg(d, config: SimulationConfig) -> np.ndarray:
    d = np.maximum(np.asarray(d, dtype=float), 1.0)
    return config.pathloss_a_db + config.pathloss_b_db * np.log10(d)


def noise_power_w(bandwidth_hz: float, noise_figure_db: float) -> float:
    """Thermal noise kTB scaled by the receiver noise figure, in watts."""
    n_dbm = -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db
    return 10.0 ** ((n_dbm - 30.0) / 10.0)


def draw_shadowing(rng: np.random.Generator, n_sites: int, sigma_db: float,
                   site_corr: float) -> np.ndarray:
    """Per-site lognormal shadowing (dB), pairwise inter-site correlation site_corr."""
    common = rng.standard_normal()
    own = rng.standard_normal(n_sites)
    return sigma_db * (math.sqrt(site_corr) * common + math.sqrt(1.0 - site_corr) * own)


def subband_center_offsets_hz(n_subbands: int, subband_hz: float) -> np.ndarray:
    return (np.arange(n_subbands) - (n_subbands - 1) / 2.0) * subband_hz


def subband_projection(n_subbands: int, subband_hz: float) -> np.ndarray:
    """Tap-to-subband frequency response matrix W[tap, subband] = exp(-j2πfτ)."""
    f = subband_center_offsets_hz(n_subbands, subband_hz)
    tau = TU6_DELAYS_US * 1e-6
    return np.exp(-2j * math.pi * np.outer(tau, f)).astype(np.complex64)


class FadingProcess:
    """Sum-of-sinusoids Rayleigh fading, one tapped-delay-line per cell link.

    Each tap is a Clarke-model sum of `n_sin` sinusoids with random arrival
    angles and phases, giving an exactly J0(2*pi*fd*tau) ensemble autocorrelation
    and unit mean power after TU tap weighting. Evaluation at an arbitrary time
    is supported (no sequential state), which the engine exploits.
    """

    def __init__(self, rng: np.random.Generator, n_links: int, doppler_hz: float,
                 n_sin: int = 32):
        n_taps = len(TU6_DELAYS_US)
        angles = rng.uniform(0.0, 2.0 * math.pi, size=(n_links, n_taps, n_sin))
        self.omega = (2.0 * math.pi * doppler_hz * np.cos(angles)).astype(np.float64)
        self.phase = rng.uniform(0.0, 2.0 * math.pi, size=(n_links, n_taps, n_sin))
        amp = np.sqrt(tu6_tap_powers() / n_sin)
        self.amp = amp.astype(np.float64)  # per-tap sinusoid amplitude
        self.n_links = n_links
        self.n_sin = n_sin

    def taps_at(self, t_s: float) -> np.ndarray:
        """Complex tap gains at time t_s, shape (n_links, n_taps)."""
        ph = self.omega * t_s + self.phase
        h = np.exp(1j * ph).sum(axis=2)
        return h * self.amp[None, :]

    def subband_gains_at(self, t_s: float, projection: np.ndarray) -> np.ndarray:
        """Per-subband power gains |H|^2 at time t_s, shape (n_links, n_subbands)."""
        taps = self.taps_at(t_s)
        h = taps @ projection
        return (h.real ** 2 + h.imag ** 2)


def large_scale_gain_db(ue_xy: np.ndarray, geom: RadioGeometry, shadow_site_db: np.ndarray,
                        config: SimulationConfig) -> np.ndarray:
    """Pathloss + antenna pattern + shadowing toward every cell, wraparound-consistent.

    Returns dB gains, shape (n_cells,). Shadowing is indexed per site.
    """
    disp = wrap_displacement(np.asarray(ue_xy, dtype=float) - geom.cell_xy, geom)  # (21, 2)
    dist = np.hypot(disp[:, 0], disp[:, 1])
    theta = np.degrees(np.arctan2(disp[:, 1], disp[:, 0]))
    ant = antenna_gain_from_angle(theta - geom.cell_azimuth_deg, geom)
    return ant - path_loss_cfg(dist, config) + shadow_site_db[geom.cell_site]


def compute_sinr(serving_cell: int, large_gain_db: np.ndarray, fading_pow: np.ndarray,
                 activity: np.ndarray, subband_power_w: float, noise_w: float) -> np.ndarray:
    """Per-subband linear SINR for one UE at one TTI.

    large_gain_db: (n_cells,) large-scale gains; fading_pow: (n_cells, n_subbands)
    fast-fading power gains; activity: (n_cells, n_subbands) 0/1 transmit activity
    of each cell. The serving signal is always present (reference-symbol based
    measurement); interferers contribute only on subbands they transmit on.
    """
    g_lin = 10.0 ** (large_gain_db / 10.0)
    rx = subband_power_w * g_lin[:, None] * fading_pow  # (cells, subbands)
    signal = rx[serving_cell]
    interf = (rx * activity).sum(axis=0) - rx[serving_cell] * activity[serving_cell]
    return signal / (interf + noise_w)
