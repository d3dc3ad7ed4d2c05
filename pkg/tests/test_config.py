import pytest

from mbmsim.config import ConfigError, SimulationConfig, load_config, parse_config_text


def test_defaults_match_table(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("# nothing here\n")
    cfg = load_config(str(empty))
    assert cfg.cell_radius_m == 500.0
    assert cfg.pathloss_a_db == 29.03 and cfg.pathloss_b_db == 35.2
    assert cfg.shadow_sigma_db == 8.0
    assert cfg.spectrum_mhz == 5.0 and cfg.n_subbands == 25
    assert cfg.tx_power_w == 20.0
    assert cfg.max_antenna_gain_db == 14.0
    assert cfg.noise_figure_db == 8.0
    assert cfg.ue_speed_kmh == 3.0
    assert cfg.cqi_period_ttis == 10
    assert cfg.max_harq_tx == 8
    assert cfg.td_mincqi_percentile == 5.0


def test_out_of_range_rejected_with_key_name():
    with pytest.raises(ConfigError, match="cell_radius_m"):
        load_config(None, {"cell_radius_m": -1.0})
    with pytest.raises(ConfigError, match="load_target"):
        load_config(None, {"load_target": 1.5})
    with pytest.raises(ConfigError, match="mode"):
        load_config(None, {"mode": "broadcast"})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("not_a_key = 3\n")
    with pytest.raises(ConfigError, match="no_such"):
        load_config(None, {"no_such": 1})


def test_population_override():
    cfg = load_config(None, {"users_per_cell": 24})
    assert cfg.population == 24 * 21 == 504


def test_file_parse_with_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("users_per_cell = 8  # eight per cell\nseed=7\nmode = ptm-adaptive\n")
    cfg = load_config(str(p))
    assert cfg.users_per_cell == 8 and cfg.seed == 7 and cfg.mode == "ptm-adaptive"


def test_bad_line_rejected(tmp_path):
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("what is this\n")


def test_derived_quantities():
    cfg = SimulationConfig()
    assert cfg.frame_bits == 12_800
    assert cfg.frame_interval_ttis == 100
    assert cfg.subband_power_w == pytest.approx(0.8)
    assert cfg.ue_speed_ms == pytest.approx(0.83333, abs=1e-4)
    assert cfg.doppler_hz == pytest.approx(5.556, abs=0.01)


def test_hashes_stable_and_sensitive():
    a = SimulationConfig()
    b = SimulationConfig()
    assert a.run_hash() == b.run_hash()
    assert a.physics_hash() == b.physics_hash()
    b.seed = 99
    assert a.run_hash() != b.run_hash()
    assert a.physics_hash() == b.physics_hash()  # seed does not affect calibration
    b.cell_radius_m = 400.0
    assert a.physics_hash() != b.physics_hash()


def test_scheme_defaults():
    assert SimulationConfig(mode="ptm-adaptive").scheme() == "ack_nack_periodic_cqi"
    assert SimulationConfig(mode="ptm-nack-oriented").scheme() == "nack_oriented"
    cfg = SimulationConfig(mode="ptm-adaptive", feedback_scheme="exclusive_nack")
    assert cfg.scheme() == "exclusive_nack"
