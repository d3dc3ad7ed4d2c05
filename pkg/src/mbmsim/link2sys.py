"""Link-to-system abstraction: MCS table, SINR->mutual information, BLER, CQI.

The abstraction works in per-symbol mutual information (bits/symbol). A block
at a given MCS decodes against a threshold slightly above its spectral
efficiency; incremental-redundancy retransmissions add their per-attempt MI
(capped). CQI c in 1..15 encodes "MCS index c-1 is the highest entry whose
single-attempt BLER at the measured SINR is <= 10%"; CQI 0 = out of range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RE_PER_SUBBAND_TTI

BLER_TARGET = 0.1

# LTE-style CQI ladder: (modulation order, code rate numerator / 1024)
_DEFAULT_LADDER = [
    (2, 78), (2, 120), (2, 193), (2, 308), (2, 449), (2, 602),
    (4, 378), (4, 490), (4, 616),
    (6, 466), (6, 567), (6, 666), (6, 772), (6, 873), (6, 948),
]


@dataclass(frozen=True)
class McsEntry:
    index: int
    modulation_order: int
    code_rate: float
    spectral_efficiency: float
    mi_threshold: float  # bits/symbol at which BLER = 0.5


class McsTable:
    """Immutable MCS ladder plus the derived CQI quantization thresholds.

    cqi_point_quantile places the SINR value a reported CQI is assumed to
    represent within its quantization bin (geometric interpolation in dB);
    0.5 is the bin midpoint, larger values make link adaptation less
    conservative against quantization.
    """

    def __init__(self, entries: list[McsEntry], mi_alpha: float = 0.9,
                 bler_slope: float = 20.0, cqi_point_quantile: float = 0.5):
        if not entries:
            raise ValueError("empty MCS table")
        eff = np.array([e.spectral_efficiency for e in entries])
        thr = np.array([e.mi_threshold for e in entries])
        if np.any(np.diff(eff) <= 0) or np.any(np.diff(thr) <= 0):
            raise ValueError("spectral efficiency and MI threshold must be strictly increasing")
        self.entries = tuple(entries)
        self.mi_alpha = mi_alpha
        self.bler_slope = bler_slope
        self.eff = eff
        self.thr = thr
        self.mod = np.array([e.modulation_order for e in entries], dtype=float)

        # SINR above which each entry meets the 10% single-attempt BLER target
        mi_need = thr + math.log(1.0 / BLER_TARGET - 1.0) / bler_slope
        if np.any(mi_need >= self.mod):
            raise ValueError("an MCS entry cannot reach 10% BLER under its modulation cap")
        self.cqi_floor_sinr = 2.0 ** (mi_need / mi_alpha) - 1.0
        if np.any(np.diff(self.cqi_floor_sinr) <= 0):
            raise ValueError("CQI SINR thresholds must be strictly increasing")

        # representative SINR per CQI value (geometric interpolation in-bin);
        # index 0 = out of range, extrapolated one quantization bin below the
        # lowest threshold with the same in-bin quantile convention
        if not 0.0 <= cqi_point_quantile < 1.0:
            raise ValueError("cqi_point_quantile must be in [0, 1)")
        q = cqi_point_quantile
        floors = self.cqi_floor_sinr
        ratio_top = floors[-1] / floors[-2]
        ratio_bottom = floors[1] / floors[0]
        pts = np.empty(len(entries) + 1)
        pts[0] = floors[0] * ratio_bottom ** (q - 1.0)
        pts[1:-1] = floors[:-1] * (floors[1:] / floors[:-1]) ** q
        pts[-1] = floors[-1] * ratio_top ** q
        self.cqi_point_sinr = pts

        # per-(CQI value, entry) single-attempt MI lookup for fast selection
        log_term = mi_alpha * np.log2(1.0 + pts)                       # (16,)
        self.mi_lut = np.minimum(log_term[:, None], self.mod[None, :])  # (16, M)
        self.mi_need = thr + math.log(1.0 / BLER_TARGET - 1.0) / bler_slope

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def top_index(self) -> int:
        return len(self.entries) - 1


def default_mcs_table(mi_alpha: float = 0.9, bler_slope: float = 20.0,
                      threshold_scale: float = 1.02,
                      cqi_point_quantile: float = 0.5) -> McsTable:
    entries = []
    for i, (mod, num) in enumerate(_DEFAULT_LADDER):
        rate = num / 1024.0
        eff = mod * rate
        entries.append(McsEntry(i, mod, rate, eff, threshold_scale * eff))
    return McsTable(entries, mi_alpha, bler_slope, cqi_point_quantile)


def load_mcs_table(path: str, mi_alpha: float = 0.9, bler_slope: float = 20.0,
                   cqi_point_quantile: float = 0.5) -> McsTable:
    """Load 'index modulation_order code_rate mi_threshold' rows (text, # comments)."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 4:
                raise ValueError(f"bad MCS table row: {line!r}")
            idx, mod, rate, thr = int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])
            entries.append(McsEntry(idx, mod, rate, mod * rate, thr))
    entries.sort(key=lambda e: e.index)
    if [e.index for e in entries] != list(range(len(entries))):
        raise ValueError("MCS indices must be 0..n-1")
    return McsTable(entries, mi_alpha, bler_slope, cqi_point_quantile)


def sinr_to_mi(sinr, modulation_order, alpha: float = 0.9):
    """Modulation-capped Shannon mapping, bits/symbol."""
    return np.minimum(alpha * np.log2(1.0 + np.asarray(sinr, dtype=float)), modulation_order)


def bler(mi_per_symbol, entry: McsEntry, slope: float = 20.0):
    """Logistic block error probability, 0.5 at the entry's MI threshold."""
    x = np.clip(slope * (np.asarray(mi_per_symbol, dtype=float) - entry.mi_threshold), -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(x))


def accumulate_ir(acc_mi: float, attempt_mi: float, entry: McsEntry,
                  cap_factor: float = 2.0) -> float:
    """Additive incremental-redundancy combining, capped at cap_factor * threshold."""
    return min(acc_mi + attempt_mi, cap_factor * entry.mi_threshold)


def compute_cqi(sinr: np.ndarray, table: McsTable) -> np.ndarray:
    """Per-subband CQI = highest table entry meeting the 10% single-attempt target.

    Returns ints in 0..len(table); 0 = even the most robust entry misses the target.
    """
    return np.searchsorted(table.cqi_floor_sinr, np.asarray(sinr, dtype=float), side="right")


def select_mcs(agg_cqi: np.ndarray, table: McsTable) -> tuple[McsEntry, bool]:
    """Highest-efficiency entry whose predicted BLER over the subband set is <= 10%.

    agg_cqi holds the aggregate CQI of the subbands the block will occupy. The
    prediction assumes the TB's symbols are spread evenly over those subbands
    (per-symbol MI = mean over subbands). Returns (entry, met_target); when no
    entry meets the target the most robust entry is returned with met_target
    False (the caller may still transmit and let retransmissions recover).
    """
    agg = np.asarray(agg_cqi, dtype=int)
    mean_mi = table.mi_lut[agg].mean(axis=0)                   # (mcs,)
    ok = mean_mi >= table.mi_need
    if not ok.any():
        return table.entries[0], False
    return table.entries[int(np.nonzero(ok)[0][-1])], True


def attempt_mi_for_subbands(sinr_subbands: np.ndarray, entry: McsEntry,
                            alpha: float = 0.9) -> float:
    """Per-symbol MI of one transmission attempt spread over the given subbands."""
    return float(np.mean(sinr_to_mi(sinr_subbands, entry.modulation_order, alpha)))


def transport_block_size(entry: McsEntry, n_subbands: int,
                         re_per_subband: int = RE_PER_SUBBAND_TTI) -> int:
    """Bits carried by one TTI over n_subbands at this MCS."""
    if n_subbands < 1:
        raise ValueError("n_subbands must be >= 1")
    return int(math.floor(entry.spectral_efficiency * re_per_subband * n_subbands))
