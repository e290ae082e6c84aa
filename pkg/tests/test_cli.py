import csv
import json

import pytest

from ssplab import cli
from ssplab.config import EXPERIMENTS, ConfigError, build_config, dump_config, ExperimentConfig
from ssplab.datasets import SyntheticSpec, make_synthetic
from ssplab.engine import METRICS_HEADER

SMALL = {
    "scale_preset": "desk",
    "epochs": 2,
    "child_num_layers": 2,
    "child_out_filters": 4,
    "batch_size": 32,
    "controller_train_steps": 2,
    "controller_num_aggregate": 3,
}


@pytest.fixture(scope="module")
def small_data():
    return make_synthetic(SyntheticSpec(n_per_class=20, num_classes=4, image_size=8, noise_sigma=0.3, seed=0))


def _cfg(**extra):
    return build_config({**SMALL, **extra})


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_artifacts(tmp_path, small_data):
    run_dir = cli.run(_cfg(), tmp_path / "r", data=small_data)
    names = {p.name for p in run_dir.iterdir()}
    assert {"config.txt", "snapshot.json", "metrics.csv", "shared.ckpt", "controller.ckpt",
            "architecture.txt", "summary.csv"} <= names
    snap = json.loads((run_dir / "snapshot.json").read_text())
    assert snap["num_slots"] == 5 and snap["label"] == "Original"
    summary = _read_csv(run_dir / "summary.csv")
    assert len(summary) == 1 and summary[0]["label"] == "Original" and summary[0]["q"] == "1"
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    rows = _read_csv(run_dir / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert rows[0]["test_error"] == "" and rows[-1]["test_error"] != ""
    assert float(summary[0]["final_test_error"]) == float(rows[-1]["test_error"])
    assert (run_dir / "config.txt").read_text() == dump_config(_cfg())


def test_p1_q300_snapshot_has_305_slots(tmp_path, small_data):
    run_dir = cli.run(_cfg(poison_set="P1", instance_factor=300, epochs=1), tmp_path / "r", data=small_data)
    snap = json.loads((run_dir / "snapshot.json").read_text())
    assert snap["num_slots"] == 305 and snap["label"] == "1d"
    assert _read_csv(run_dir / "summary.csv")[0]["num_slots"] == "305"


def test_repeated_run_is_byte_identical(tmp_path, small_data):
    cfg = _cfg(poison_set="P4", instance_factor=1)
    a = cli.run(cfg, tmp_path / "a", data=small_data)
    b = cli.run(cfg, tmp_path / "b", data=small_data)
    for name in ("metrics.csv", "summary.csv", "architecture.txt", "shared.ckpt", "controller.ckpt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_finished_run_is_skipped_unless_config_changes(tmp_path, small_data):
    cfg = _cfg(epochs=1)
    run_dir = cli.run(cfg, tmp_path / "r", data=small_data)
    stamp = (run_dir / "metrics.csv").stat().st_mtime_ns
    cli.run(cfg, run_dir, data=small_data)
    assert (run_dir / "metrics.csv").stat().st_mtime_ns == stamp
    cli.run(cfg.with_overrides(seed=5), run_dir, data=small_data)
    assert _read_csv(run_dir / "summary.csv")[0]["seed"] == "5"


def test_numerical_abort_leaves_diagnostic(tmp_path, small_data, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite loss at epoch 0")

    monkeypatch.setattr(cli, "run_epoch", boom)
    with pytest.raises(FloatingPointError):
        cli.run(_cfg(), tmp_path / "r", data=small_data)
    assert "non-finite" in (tmp_path / "r" / "abort.txt").read_text()
    assert not (tmp_path / "r" / "summary.csv").exists()


def test_grid_q_column_and_medians(tmp_path, small_data):
    grid = cli.run_grid(_cfg(epochs=1), ["1a", "1b", "1c", "1d"], [1, 2], tmp_path / "g", data=small_data)
    rows = _read_csv(grid / "grid_summary.csv")
    assert [r["q"] for r in rows] == ["6", "36", "120", "300"]
    assert all(r["n_seeds"] == "2" for r in rows)
    runs = cli.collect_summaries(grid)
    for r in rows:
        mine = sorted(x["valid"] for x in runs if x["label"] == r["label"])
        assert float(r["median_valid_error"]) == pytest.approx(sum(mine) / 2, abs=1e-6)


def test_full_grid_one_seed_and_figures(tmp_path, small_data):
    grid = cli.run_grid(_cfg(), list(EXPERIMENTS), [1], tmp_path / "g", data=small_data)
    assert len(_read_csv(grid / "grid_summary.csv")) == 17
    fig4, fig5, incomplete = cli.emit_figure_data(grid)
    assert incomplete == []
    f4 = _read_csv(fig4)
    assert set(f4[0]) == {"experiment", "epoch", "ma20_valid_error"}
    for label in EXPERIMENTS:
        assert [r["epoch"] for r in f4 if r["experiment"] == label] == ["0", "1"]
    f5 = _read_csv(fig5)
    assert list(f5[0]) == ["poison_set", "q", "final_valid_error", "final_test_error"]
    assert [r["q"] for r in f5 if r["poison_set"] == "P3"] == ["6", "36", "120", "300"]
    assert [r["q"] for r in f5 if r["poison_set"] == "none"] == ["1"]
    assert len(f5) == 17

    # a rerun into a fresh directory reproduces every CSV byte for byte
    again = cli.run_grid(_cfg(), list(EXPERIMENTS), [1], tmp_path / "h", data=small_data)
    cli.emit_figure_data(again)
    for name in ("grid_summary.csv", "figure4.csv", "figure5.csv"):
        assert (grid / name).read_bytes() == (again / name).read_bytes()


def _fake_run(root, name, label, pset, q, errors):
    d = root / name
    d.mkdir()
    (d / "config.txt").write_text("x\n")
    with open(d / "metrics.csv", "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for e, v in enumerate(errors):
            fh.write(f"{e},1.0,{v},,0.0,0.0,0.0\n")
    (d / "summary.csv").write_text(f"{cli.SUMMARY_HEADER}\n{label},{pset},{q},1,5,{errors[-1]},{errors[-1]}\n")


def test_constant_error_gives_constant_moving_average(tmp_path):
    _fake_run(tmp_path, "Original_seed1", "Original", "none", 1, [50.0] * 30)
    fig4, _, _ = cli.emit_figure_data(tmp_path)
    assert [float(r["ma20_valid_error"]) for r in _read_csv(fig4)] == [50.0] * 30


def test_figure4_uses_median_over_seeds(tmp_path):
    _fake_run(tmp_path, "3a_seed1", "3a", "P3", 6, [10.0, 20.0])
    _fake_run(tmp_path, "3a_seed2", "3a", "P3", 6, [30.0, 40.0])
    _fake_run(tmp_path, "3a_seed3", "3a", "P3", 6, [90.0, 0.0])
    fig4, _, _ = cli.emit_figure_data(tmp_path)
    # medians per epoch are 30 and 20; the moving average of those is 30, 25
    assert [float(r["ma20_valid_error"]) for r in _read_csv(fig4)] == [30.0, 25.0]


def test_incomplete_runs_are_flagged(tmp_path, capsys):
    _fake_run(tmp_path, "1a_seed1", "1a", "P1", 6, [40.0, 30.0])
    (tmp_path / "1a_seed2").mkdir()
    (tmp_path / "1a_seed2" / "config.txt").write_text("x\n")
    assert cli.main(["figures", "--grid", str(tmp_path)]) == cli.EXIT_DATA
    assert (tmp_path / "figures_incomplete.txt").read_text().split() == ["1a_seed2"]
    assert (tmp_path / "figure5.csv").exists()
    assert "incomplete" in capsys.readouterr().err


def test_grid_rejects_bad_labels(tmp_path):
    with pytest.raises(ConfigError, match="empty"):
        cli.run_grid(_cfg(), [], [1], tmp_path)
    with pytest.raises(ConfigError, match="unknown"):
        cli.run_grid(_cfg(), ["1e"], [1], tmp_path)
    with pytest.raises(ConfigError, match="seed"):
        cli.run_grid(_cfg(), ["1a"], [], tmp_path)


def test_dump_default_config_command(capsys):
    assert cli.main(["dump-default-config"]) == cli.EXIT_OK
    assert capsys.readouterr().out == dump_config(ExperimentConfig())


def test_exit_code_for_config_errors(tmp_path, capsys):
    assert cli.main(["run", "--out", str(tmp_path / "r"), "--child_num_layer", "3"]) == cli.EXIT_CONFIG
    assert "unknown" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("cutout = 16\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "r")]) == cli.EXIT_CONFIG
    assert cli.main(["grid", "--labels", "9z", "--out", str(tmp_path / "g")]) == cli.EXIT_CONFIG
    assert cli.main(["grid", "--labels", "1a", "--seeds", "one", "--out", str(tmp_path / "g")]) == cli.EXIT_CONFIG
    assert not (tmp_path / "r").exists()


def test_exit_code_for_missing_dataset(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.DATA_ROOT_ENV, raising=False)
    assert cli.main(["run", "--out", str(tmp_path / "r"), "--epochs", "1"]) == cli.EXIT_DATA
    assert cli.DATA_ROOT_ENV in capsys.readouterr().err
    monkeypatch.setenv(cli.DATA_ROOT_ENV, str(tmp_path / "nowhere"))
    assert cli.main(["run", "--out", str(tmp_path / "r"), "--epochs", "1"]) == cli.EXIT_DATA
    assert cli.main(["figures", "--grid", str(tmp_path)]) == cli.EXIT_DATA


def test_exit_code_for_numerical_abort(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(cli, "run_epoch", boom)
    monkeypatch.setattr(cli, "load_data", lambda cfg: make_synthetic(SyntheticSpec(n_per_class=10, image_size=8)))
    argv = ["run", "--out", str(tmp_path / "r"), "--scale_preset", "desk", "--epochs", "1"]
    assert cli.main(argv) == cli.EXIT_NUMERIC


def test_run_command_end_to_end(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "load_data", lambda cfg: make_synthetic(SyntheticSpec(n_per_class=10, image_size=8)))
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("".join(f"{k} = {v}\n" for k, v in SMALL.items()))
    argv = ["run", "--config", str(cfg_file), "--out", str(tmp_path / "r"), "--poison_set", "P2",
            "--instance_factor=6", "--epochs", "1"]
    assert cli.main(argv) == cli.EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == cli.SUMMARY_HEADER and out[1].startswith("2b,P2,6,")


def test_override_parsing():
    assert cli._parse_overrides(["--a", "1", "--b=2", "--child-num-layers", "3"]) == {
        "a": "1", "b": "2", "child_num_layers": "3"}
    with pytest.raises(ConfigError):
        cli._parse_overrides(["--a"])
    with pytest.raises(ConfigError):
        cli._parse_overrides(["stray"])
