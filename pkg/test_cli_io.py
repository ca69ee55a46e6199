"""
FlowAug - Command Line and File Format Tests
"""

import numpy as np
import pytest
from click.testing import CliRunner

from app import cli, exit_code_for
from config import RUN_CONFIG_FILENAME, RunConfig
from engine.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    LeakageError,
    NonFiniteGradientError,
    ShapeError,
)
from utils.image_io import load_dataset, make_sheet, read_pgm, save_dataset, write_pgm
from utils.io_utils import read_csv, write_csv


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def trained_run(runner, tmp_path):
    """Generated dataset plus a one-epoch flow trained on its rare class."""
    data = tmp_path / "data"
    flow = tmp_path / "flow"
    result = runner.invoke(cli, ["gen-data", "--out", str(data), "--seed", "1", "--n", "40", "--image-size", "8"])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        cli, ["train-flow", "--data", str(data), "--out", str(flow), "--seed", "1", "--epochs", "1"]
    )
    assert result.exit_code == 0, result.output
    return data, flow


# ---- commands -----------------------------------------------------------------


def test_verify_passes(runner):
    result = runner.invoke(cli, ["verify", "--seed", "0", "--trials", "2"])
    assert result.exit_code == 0, result.output
    assert "9/9 checks passed" in result.output


def test_missing_seed_is_a_usage_error(runner, tmp_path):
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "d")])
    assert result.exit_code == 2


def test_unknown_config_key_exits_with_config_code(runner, tmp_path):
    config_file = tmp_path / "run.env"
    config_file.write_text("flow_levels=2\nnot_a_key=3\n")
    result = runner.invoke(cli, ["gen-data", "--out", str(tmp_path / "d"), "--seed", "1", "--config", str(config_file)])
    assert result.exit_code == 3
    assert "not_a_key" in result.output


def test_checkpoint_without_run_config_exits_with_io_code(runner, tmp_path):
    checkpoint = tmp_path / "flow.ckpt"
    checkpoint.write_bytes(b"FLOWCKPT")
    args = ["sample", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "s"), "--seed", "1"]
    result = runner.invoke(cli, args)
    assert result.exit_code == 4
    assert "CheckpointError" in result.output


def test_gen_data_writes_manifest_and_echoes_config(trained_run):
    data, flow = trained_run
    images, labels = load_dataset(data)
    assert images.shape == (40, 8, 8, 1)
    assert np.bincount(labels, minlength=3).tolist() == [28, 9, 3]
    assert (data / RUN_CONFIG_FILENAME).is_file()
    assert (data / "sheet_bad.pgm").is_file()
    assert (flow / "flow.ckpt").is_file()
    assert len(read_csv(flow / "loss_curve.csv")) == 1
    assert (flow / "run_log.jsonl").stat().st_size > 0


def test_zero_temperature_samples_are_identical_files(runner, trained_run, tmp_path):
    _, flow = trained_run
    out = tmp_path / "samples"
    result = runner.invoke(
        cli,
        [
            "sample", "--checkpoint", str(flow / "flow.ckpt"), "--out", str(out),
            "--seed", "2", "--n", "3", "--temperature", "0",
        ],
    )
    assert result.exit_code == 0, result.output
    payloads = [(out / f"sample_{i:05d}.pgm").read_bytes() for i in range(3)]
    assert payloads[0] == payloads[1] == payloads[2]
    assert (out / "samples_sheet.pgm").is_file()


def test_augment_writes_images_and_provenance(runner, trained_run, tmp_path):
    data, flow = trained_run
    out = tmp_path / "aug"
    result = runner.invoke(
        cli,
        [
            "augment", "--checkpoint", str(flow / "flow.ckpt"), "--data", str(data), "--out", str(out),
            "--seed", "3", "--count", "4", "--strip-steps", "4",
        ],
    )
    assert result.exit_code == 0, result.output
    rows = read_csv(out / "aug_provenance.csv")
    assert len(rows) == 4
    _, labels = load_dataset(data)
    for row in rows:
        assert labels[int(row["source_a"])] == 2
        assert labels[int(row["source_b"])] == 2
    assert len(list((out / "images").glob("aug_*.pgm"))) == 4
    assert (out / "interpolation_strip.pgm").is_file()
    assert len(read_csv(out / "plurality.csv")) == 4


def test_crossval_without_augmentation_writes_reports(runner, tmp_path):
    out = tmp_path / "cv"
    result = runner.invoke(cli, ["crossval", "--out", str(out), "--seed", "0", "--k", "3", "--augment", "0"])
    assert result.exit_code == 0, result.output
    assert len(read_csv(out / "paired.csv")) == 3
    sign = {row["metric"]: row for row in read_csv(out / "sign_test.csv")}
    assert float(sign["rare_f1"]["p_value"]) == 1.0


def test_exit_codes_follow_error_kinds():
    assert exit_code_for(LeakageError("leak")) == 6
    assert exit_code_for(ConfigError("bad")) == 3
    assert exit_code_for(ShapeError("shape")) == 3
    assert exit_code_for(CheckpointError("ckpt")) == 4
    assert exit_code_for(DataError("data")) == 4
    assert exit_code_for(FileNotFoundError("missing")) == 4
    assert exit_code_for(DivergenceError("diverged")) == 5
    assert exit_code_for(NonFiniteGradientError("w")) == 5
    assert exit_code_for(RuntimeError("other")) == 1


# ---- run configuration --------------------------------------------------------


def test_run_config_echo_reloads_identically(tmp_path):
    original = RunConfig.load(overrides={"seed": 7, "flow_levels": 3, "class_ratios": "0.6,0.3,0.1"})
    path = original.write(str(tmp_path))
    reloaded = RunConfig.load(str(path))
    assert reloaded == original
    assert reloaded.class_ratios == (0.6, 0.3, 0.1)
    assert reloaded.digest() == original.digest()


def test_run_config_precedence(tmp_path):
    config_file = tmp_path / "run.env"
    config_file.write_text("flow_epochs=9\nmax_lr=0.005\n")
    run_config = RunConfig.load(str(config_file), overrides={"flow_epochs": 4, "max_lr": None})
    assert run_config.flow_epochs == 4
    assert run_config.max_lr == 0.005


def test_run_config_rejects_bad_entries(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.defaults().updated({"no_such_key": 1})
    with pytest.raises(ConfigError):
        RunConfig.defaults().updated({"flow_levels": "many"})
    with pytest.raises(ConfigError):
        RunConfig.defaults().updated({"interp_mode": "cubic"})
    with pytest.raises(ConfigError):
        RunConfig.load(str(tmp_path / "absent.env"))


def test_architecture_digest_ignores_training_knobs():
    base = RunConfig.defaults()
    assert base.updated({"max_lr": 0.1}).digest() == base.digest()
    assert base.updated({"flow_steps": 7}).digest() != base.digest()


# ---- file formats -------------------------------------------------------------


def test_pgm_round_trip_is_lossless(rng, tmp_path):
    image = np.floor(rng.random((6, 5, 1)) * 256) / 256
    path = write_pgm(tmp_path / "x.pgm", image)
    assert path.read_bytes().startswith(b"P5")
    assert np.array_equal(read_pgm(path), image)


def test_read_pgm_rejects_garbage(tmp_path):
    path = tmp_path / "broken.pgm"
    path.write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_pgm(path)


def test_dataset_directory_round_trip(rng, tmp_path):
    images = np.floor(rng.random((5, 4, 4, 1)) * 256) / 256
    labels = np.array([0, 2, 1, 2, 0])
    save_dataset(tmp_path, images, labels)
    loaded_images, loaded_labels = load_dataset(tmp_path)
    assert np.array_equal(loaded_images, images)
    assert np.array_equal(loaded_labels, labels)


def test_sheet_tiles_images_with_borders():
    tiles = [np.full((2, 3, 1), v / 256) for v in (10, 20, 30)]
    sheet = make_sheet(tiles, columns=2)
    assert sheet.shape == (2 * 3 + 1, 2 * 4 + 1, 1)
    assert sheet[1, 1, 0] == 10 / 256
    assert sheet[4, 1, 0] == 30 / 256
    with pytest.raises(DataError):
        make_sheet([])


def test_csv_keeps_full_float_precision(tmp_path):
    value = 1.0 / 3.0
    path = write_csv(tmp_path / "t.csv", [{"a": value, "b": 2}, {"a": np.float64(0.1)}], ["a", "b"])
    rows = read_csv(path)
    assert float(rows[0]["a"]) == value
    assert rows[0]["b"] == "2"
    assert rows[1]["a"] == "0.1"
    assert rows[1]["b"] == ""
