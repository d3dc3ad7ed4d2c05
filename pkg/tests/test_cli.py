import os

from mbmsim.cli import main


def test_cli_run_and_report(tmp_path):
    out = tmp_path / "run1"
    rc = main(["run", "--mode", "ptm-adaptive", "--users-per-cell", "2", "--seed", "5",
               "--duration-ttis", "1500", "--warmup-ttis", "300", "--out", str(out)])
    assert rc == 0
    assert os.path.exists(out / "summary.csv")
    agg = tmp_path / "agg"
    rc = main(["report", "--runs", str(out), "--out", str(agg)])
    assert rc == 0
    assert os.path.exists(agg / "fig4.csv")


def test_cli_layout(tmp_path):
    path = tmp_path / "layout.csv"
    rc = main(["layout", "--out", str(path)])
    assert rc == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "cell_id,site_x,site_y,azimuth_deg"
    assert len(lines) == 22


def test_cli_rejects_bad_config(tmp_path, capsys):
    rc = main(["run", "--set", "cell_radius_m=-5", "--duration-ttis", "10"])
    assert rc == 2
    assert "cell_radius_m" in capsys.readouterr().err


def test_cli_config_file_and_override(tmp_path):
    cfile = tmp_path / "c.cfg"
    cfile.write_text("users_per_cell = 3\nduration_ttis = 800\nwarmup_ttis = 100\n")
    out = tmp_path / "r"
    rc = main(["run", "--config", str(cfile), "--seed", "2", "--out", str(out),
               "--set", "mode=ptm-adaptive"])
    assert rc == 0
    summary = (out / "summary.csv").read_text().splitlines()[1]
    assert summary.split(",")[1] == "3"
