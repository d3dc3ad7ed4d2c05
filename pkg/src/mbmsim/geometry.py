"""Hexagonal 21-cell layout with toroidal wraparound, antenna pattern, UE mobility."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import N_CELLS, N_SITES, SECTORS_PER_SITE, SimulationConfig

SECTOR_AZIMUTHS_DEG = (0.0, 120.0, 240.0)


@dataclass
class UePosition:
    xy: np.ndarray          # shape (2,), meters
    heading: float          # radians
    speed: float            # m/s


@dataclass
class RadioGeometry:
    sites: np.ndarray           # (7, 2) site positions, m
    cell_site: np.ndarray       # (21,) site index per cell
    cell_azimuth_deg: np.ndarray  # (21,) sector boresight
    cell_radius: float
    isd: float
    max_antenna_gain_db: float
    theta3db_deg: float
    backoff_db: float
    wrap_vectors: np.ndarray    # (6, 2) translations of the mirror clusters

    @property
    def n_cells(self) -> int:
        return len(self.cell_site)

    @property
    def cell_xy(self) -> np.ndarray:
        return self.sites[self.cell_site]

    @property
    def translations(self) -> np.ndarray:
        """Identity plus the 6 wrap vectors, shape (7, 2)."""
        return np.vstack([np.zeros((1, 2)), self.wrap_vectors])


def build_layout(config: SimulationConfig) -> RadioGeometry:
    """7-site hexagonal cluster, 3 sectors each, with the size-7 cluster wrap lattice."""
    isd = config.isd_m
    angles = np.deg2rad(np.arange(6) * 60.0)
    sites = np.zeros((N_SITES, 2))
    sites[1:, 0] = isd * np.cos(angles)
    sites[1:, 1] = isd * np.sin(angles)

    cell_site = np.repeat(np.arange(N_SITES), SECTORS_PER_SITE)
    cell_az = np.tile(np.array(SECTOR_AZIMUTHS_DEG), N_SITES)

    # cluster repeat lattice for N = i^2 + i j + j^2 = 7 with (i, j) = (2, 1):
    # T1 = 2*a1 + a2, T2 = -a1 + 3*a2 with a1 = isd*(1,0), a2 = isd*(1/2, sqrt(3)/2)
    t1 = isd * np.array([2.5, math.sqrt(3) / 2.0])
    t2 = isd * np.array([0.5, 3.0 * math.sqrt(3) / 2.0])
    t3 = t1 - t2
    wrap = np.array([t1, -t1, t2, -t2, t3, -t3])

    return RadioGeometry(
        sites=sites,
        cell_site=cell_site,
        cell_azimuth_deg=cell_az,
        cell_radius=config.cell_radius_m,
        isd=isd,
        max_antenna_gain_db=config.max_antenna_gain_db,
        theta3db_deg=config.antenna_theta3db_deg,
        backoff_db=config.antenna_backoff_db,
        wrap_vectors=wrap,
    )


def wrap_displacement(delta: np.ndarray, geom: RadioGeometry) -> np.ndarray:
    """Shortest representative of a displacement on the torus.

    delta may be (2,) or (..., 2); the minimum is taken over the direct vector
    and the 6 wrap translations.
    """
    d = np.asarray(delta, dtype=float)
    cands = d[..., None, :] - geom.translations  # (..., 7, 2)
    dist2 = np.sum(cands * cands, axis=-1)
    idx = np.argmin(dist2, axis=-1)
    return np.take_along_axis(cands, idx[..., None, None], axis=-2)[..., 0, :]


def wrap_distance(a, b, geom: RadioGeometry) -> float:
    """Toroidal distance: min over direct and 6 translated distances."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = wrap_displacement(a - b, geom)
    return float(np.hypot(d[..., 0], d[..., 1])) if d.ndim == 1 else np.hypot(d[..., 0], d[..., 1])


def in_torus(p: np.ndarray, geom: RadioGeometry) -> bool:
    """Inside the Voronoi cell of the wrap lattice around the origin."""
    p = np.asarray(p, dtype=float)
    w = geom.wrap_vectors
    return bool(np.all(p @ w.T <= 0.5 * np.sum(w * w, axis=1) + 1e-9))


def rewrap(p: np.ndarray, geom: RadioGeometry) -> np.ndarray:
    """Translate a point back into the torus region (idempotent inside it)."""
    p = np.asarray(p, dtype=float).copy()
    w = geom.wrap_vectors
    w2 = 0.5 * np.sum(w * w, axis=1)
    for _ in range(8):
        proj = p @ w.T
        k = int(np.argmax(proj - w2))
        if proj[k] <= w2[k] + 1e-9:
            return p
        p = p - w[k]
    return p


def rewrap_many(pts: np.ndarray, geom: RadioGeometry) -> np.ndarray:
    """Vectorized rewrap for an (N, 2) array."""
    p = np.asarray(pts, dtype=float).copy()
    w = geom.wrap_vectors
    w2 = 0.5 * np.sum(w * w, axis=1)
    for _ in range(8):
        proj = p @ w.T - w2
        k = np.argmax(proj, axis=1)
        off = np.take_along_axis(proj, k[:, None], axis=1)[:, 0]
        bad = off > 1e-9
        if not np.any(bad):
            break
        p[bad] -= w[k[bad]]
    return p


def antenna_gain(cell: int, ue_xy: np.ndarray, geom: RadioGeometry) -> float:
    """Sectorized pattern G = Gmax - min(12*(dtheta/theta3dB)^2, Am), wraparound azimuth."""
    disp = wrap_displacement(np.asarray(ue_xy, dtype=float) - geom.sites[geom.cell_site[cell]], geom)
    theta = math.degrees(math.atan2(disp[1], disp[0]))
    dtheta = abs((theta - geom.cell_azimuth_deg[cell] + 180.0) % 360.0 - 180.0)
    att = min(12.0 * (dtheta / geom.theta3db_deg) ** 2, geom.backoff_db)
    return geom.max_antenna_gain_db - att


def antenna_gain_from_angle(dtheta_deg, geom: RadioGeometry):
    """Same pattern for precomputed azimuth offsets (vectorized)."""
    d = np.abs((np.asarray(dtheta_deg, dtype=float) + 180.0) % 360.0 - 180.0)
    att = np.minimum(12.0 * (d / geom.theta3db_deg) ** 2, geom.backoff_db)
    return geom.max_antenna_gain_db - att


def torus_bounding_halfwidth(geom: RadioGeometry) -> float:
    # circumradius of the hexagonal Voronoi cell: apothem * 2/sqrt(3)
    apothem = 0.5 * float(np.linalg.norm(geom.wrap_vectors[0]))
    return apothem * 2.0 / math.sqrt(3.0)


def spawn_position(rng: np.random.Generator, geom: RadioGeometry) -> UePosition:
    """Uniform position over the torus (rejection in the bounding box), uniform heading."""
    r = torus_bounding_halfwidth(geom)
    while True:
        p = rng.uniform(-r, r, size=2)
        if in_torus(p, geom):
            break
    heading = rng.uniform(0.0, 2.0 * math.pi)
    return UePosition(xy=p, heading=heading, speed=0.0)


def step_mobility(ue: UePosition, dt: float, geom: RadioGeometry) -> UePosition:
    """Advance along the current heading by speed*dt and rewrap."""
    if dt <= 0.0:
        return UePosition(xy=ue.xy.copy(), heading=ue.heading, speed=ue.speed)
    delta = ue.speed * dt * np.array([math.cos(ue.heading), math.sin(ue.heading)])
    return UePosition(xy=rewrap(ue.xy + delta, geom), heading=ue.heading, speed=ue.speed)


def layout_csv(geom: RadioGeometry) -> str:
    """Debug dump: cell_id, site_x, site_y, azimuth_deg."""
    lines = ["cell_id,site_x,site_y,azimuth_deg"]
    for c in range(geom.n_cells):
        s = geom.sites[geom.cell_site[c]]
        lines.append(f"{c},{s[0]:.6g},{s[1]:.6g},{geom.cell_azimuth_deg[c]:.6g}")
    return "\n".join(lines) + "\n"
