import json

from collabsg.cli import main


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["simulate", "--bogus", "1", "--out", "x"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["--help"]) == 0


def test_data_errors(tmp_path, capsys):
    assert main(["eval", "--run", str(tmp_path / "nope"), "--dataset", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err
    assert main(["run", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2
    assert main(["export", "--run", str(tmp_path), "--format", "json", "--out", str(tmp_path / "sg.json")]) == 2
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"server": {"no_such_key": 1}}))
    assert main(["run", "--dataset", str(tmp_path), "--config", str(cfg), "--out", str(tmp_path / "r")]) == 2


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--seed", "7", "--agents", "2", "--duration", "4", "--world-preset", "small",
            "--loop-blocks", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_run_eval_export(small_dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["run", "--dataset", str(small_dataset), "--out", str(run), "--deterministic"]) == 0
    for name in ("graph.txt", "scenegraph.json", "bandwidth.json", "run.json", "agent0/traj_est.csv"):
        assert (run / name).is_file()
    assert main(["eval", "--run", str(run), "--dataset", str(small_dataset)]) == 0
    m = json.loads((run / "metrics.json").read_text())
    for key in ("ate_mean_m", "ate_std_m", "etrans_pct", "erot_deg_per_km", "intersections_all",
                "intersections_turned", "objects", "bandwidth_bytes_per_agent", "loop_closures"):
        assert key in m
    assert set(m["bandwidth_bytes_per_agent"]) == {"0", "1"}
    out = tmp_path / "sg.json"
    assert main(["export", "--run", str(run), "--format", "json", "--out", str(out)]) == 0
    assert out.read_text() == (run / "scenegraph.json").read_text()
