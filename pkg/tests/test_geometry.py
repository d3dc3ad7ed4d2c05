import math

import numpy as np
import pytest

from mbmsim.config import SimulationConfig
from mbmsim.geometry import (RadioGeometry, antenna_gain, build_layout, in_torus,
                             rewrap, rewrap_many, spawn_position, step_mobility,
                             torus_bounding_halfwidth, wrap_distance, UePosition)


@pytest.fixture(scope="module")
def geom():
    return build_layout(SimulationConfig())


def brute_force_wrap_distance(a, b, geom: RadioGeometry):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    best = np.hypot(*d)
    for w in geom.wrap_vectors:
        best = min(best, float(np.hypot(*(d - w))))
    return best


def test_layout_has_21_cells_from_7_sites(geom):
    assert len(geom.sites) == 7
    assert geom.n_cells == 21
    az = geom.cell_azimuth_deg.reshape(7, 3)
    assert np.allclose(az, [0.0, 120.0, 240.0])


def test_adjacent_site_distance_equals_isd(geom):
    d = np.hypot(*(geom.sites[1:] - geom.sites[0]).T)
    assert np.allclose(d, 1500.0)


def test_wrap_vectors_tile_with_mirror_cluster_spacing(geom):
    lens = np.hypot(geom.wrap_vectors[:, 0], geom.wrap_vectors[:, 1])
    assert np.allclose(lens, math.sqrt(7) * 1500.0)
    # vectors come in +/- pairs
    assert np.allclose(geom.wrap_vectors[0], -geom.wrap_vectors[1])


def test_wrap_distance_identity(geom):
    p = np.array([123.0, -456.0])
    assert wrap_distance(p, p, geom) == 0.0


def test_wrap_distance_of_wrap_vector_is_zero(geom):
    p = np.array([50.0, 80.0])
    for w in geom.wrap_vectors:
        assert wrap_distance(p, p + w, geom) < 1e-9


def test_wrap_distance_matches_brute_force(geom):
    rng = np.random.default_rng(7)
    r = torus_bounding_halfwidth(geom)
    for _ in range(300):
        a = rng.uniform(-r, r, 2)
        b = rng.uniform(-r, r, 2)
        assert wrap_distance(a, b, geom) == pytest.approx(
            brute_force_wrap_distance(a, b, geom), abs=1e-9)


def test_wrap_distance_is_a_metric_on_random_triples(geom):
    rng = np.random.default_rng(11)
    r = torus_bounding_halfwidth(geom)
    for _ in range(200):
        a, b, c = (rng.uniform(-r, r, 2) for _ in range(3))
        dab = wrap_distance(a, b, geom)
        dba = wrap_distance(b, a, geom)
        assert dab == pytest.approx(dba, abs=1e-9)
        assert dab <= wrap_distance(a, c, geom) + wrap_distance(c, b, geom) + 1e-9


def test_antenna_gain_pattern(geom):
    site = geom.sites[geom.cell_site[0]]
    # cell 0 boresight is 0 degrees
    assert antenna_gain(0, site + [100.0, 0.0], geom) == pytest.approx(14.0)
    at70 = site + 100.0 * np.array([math.cos(math.radians(70)), math.sin(math.radians(70))])
    assert antenna_gain(0, at70, geom) == pytest.approx(2.0, abs=1e-6)
    at180 = site + [-100.0, 0.0]
    assert antenna_gain(0, at180, geom) == pytest.approx(-6.0)


def test_step_mobility_displacement_and_zero_dt(geom):
    speed = 3.0 / 3.6
    ue = UePosition(xy=np.array([10.0, 20.0]), heading=0.7, speed=speed)
    moved = step_mobility(ue, 1.0, geom)
    assert wrap_distance(ue.xy, moved.xy, geom) == pytest.approx(speed, abs=1e-9)
    assert speed == pytest.approx(0.83333, abs=1e-4)
    same = step_mobility(ue, 0.0, geom)
    assert np.allclose(same.xy, ue.xy)


def test_mobility_containment_one_million_steps(geom):
    # 1000 walkers x 1000 steps with rewrap after every step
    rng = np.random.default_rng(3)
    r = torus_bounding_halfwidth(geom)
    pos = np.stack([spawn_position(rng, geom).xy for _ in range(1000)])
    heading = rng.uniform(0, 2 * math.pi, 1000)
    step = 0.83333 * 5.0  # 5 s strides
    for _ in range(1000):
        pos[:, 0] += step * np.cos(heading)
        pos[:, 1] += step * np.sin(heading)
        pos = rewrap_many(pos, geom)
        heading = rng.uniform(0, 2 * math.pi, 1000)
    w = geom.wrap_vectors
    proj = pos @ w.T - 0.5 * np.sum(w * w, axis=1)
    assert np.all(proj <= 1e-6)


def test_spawn_uniformity_chi_square_and_cell_coverage(geom):
    rng = np.random.default_rng(5)
    n = 100_000
    r = torus_bounding_halfwidth(geom)
    pts = []
    while len(pts) < n:
        cand = rng.uniform(-r, r, size=(n, 2))
        w = geom.wrap_vectors
        inside = np.all(cand @ w.T <= 0.5 * np.sum(w * w, axis=1) + 1e-9, axis=1)
        pts.append(cand[inside])
        pts = [np.concatenate(pts)]
    pts = pts[0][:n]
    # geometric server: pathloss + antenna only (equal-area sectors)
    best = np.full(n, -1)
    best_gain = np.full(n, -1e9)
    for c in range(geom.n_cells):
        delta = pts - geom.sites[geom.cell_site[c]]
        cands = delta[:, None, :] - geom.translations[None]
        d2 = np.sum(cands * cands, axis=2)
        k = np.argmin(d2, axis=1)
        chosen = cands[np.arange(n), k]
        dist = np.maximum(np.hypot(chosen[:, 0], chosen[:, 1]), 1.0)
        theta = np.degrees(np.arctan2(chosen[:, 1], chosen[:, 0]))
        dth = np.abs((theta - geom.cell_azimuth_deg[c] + 180) % 360 - 180)
        g = -np.minimum(12 * (dth / 70.0) ** 2, 20.0) - 35.2 * np.log10(dist)
        upd = g > best_gain
        best[upd] = c
        best_gain[upd] = g[upd]
    counts = np.bincount(best, minlength=21)
    assert np.all(counts > 0)  # every cell covers a nonempty region
    p = 1 / 21
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3.5 * sigma)


def test_spawn_deterministic_given_seed(geom):
    a = spawn_position(np.random.default_rng(42), geom)
    b = spawn_position(np.random.default_rng(42), geom)
    assert np.allclose(a.xy, b.xy) and a.heading == b.heading


def test_rewrap_is_idempotent_inside(geom):
    p = np.array([100.0, 50.0])
    assert in_torus(p, geom)
    assert np.allclose(rewrap(p, geom), p)
