"""
Tests for the command-line surface and configuration loading.
"""

import hashlib
from pathlib import Path

import pandas as pd
import pytest
import yaml
from typer.testing import CliRunner

from app.config import DEFAULT_CONFIG, DEFAULT_OUT, OUT_ENV, load_config, resolve_out_dir
from app.errors import ConfigError
from app.main import app

runner = CliRunner()


def _tiny() -> dict:
    """A config small enough to train end to end in a test."""
    return {
        "experiment": {"id": "tiny", "seed": 0, "eval_seed": 9},
        "data": {
            "source": "synthetic",
            "synthetic": {"num_classes": 3, "side": 8, "channels": 1},
            "train_per_class": 3,
            "val_per_class": 1,
            "test_per_class": 2,
        },
        "pipeline": {"resize_side": 10, "crop_side": 8},
        "model": {"input_shape": [8, 8, 1], "num_classes": 3, "stem_channels": 2, "stage_blocks": [1, 1], "dtype": "float64"},
        "baseline": {"epochs": 1, "batch_size": 4, "lr": 0.05},
        "training": {"epochs": 1, "batch_size": 4, "lr": 0.05},
        "grid": {
            "runs": [
                {
                    "method": "augment",
                    "distortions": ["gaussian"],
                    "axes": [
                        {"name": "p", "start": 1.0, "end": 1.0, "points": 1},
                        {"name": "gaussian", "start": 0.1, "end": 0.1, "points": 1},
                    ],
                }
            ]
        },
        "evaluation": {"distortions": ["gaussian", "rotation"]},
    }


def _write(tmp_path, cfg: dict):
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path


def test_dry_run_lists_default_grids():
    """The shipped config resolves to 12 ST points and 8 DA points."""
    result = runner.invoke(app, ["run", "--dry-run", "--config", str(DEFAULT_CONFIG)])
    assert result.exit_code == 0, result.output
    assert "20 runs in 2 grids" in result.output
    grids = load_config(DEFAULT_CONFIG).grids()
    assert [len(grid.points()) for grid in grids] == [12, 8]


def test_dry_run_lists_rotation_grids():
    """The rotation config pairs nine ST points with nine ST-sym points."""
    config = Path(DEFAULT_CONFIG).parent / "rotation_sym.yaml"
    result = runner.invoke(app, ["run", "--dry-run", "--config", str(config)])
    assert result.exit_code == 0, result.output
    assert "18 runs in 2 grids" in result.output
    assert [grid.method for grid in load_config(config).grids()] == ["stability", "stability_sym"]


def test_missing_dataset_exits_with_config_code(tmp_path):
    """An idx source pointing at missing files is a config error."""
    cfg = _tiny()
    missing = str(tmp_path / "missing.idx")
    cfg["data"] = {
        "source": "idx",
        "train_images": missing,
        "train_labels": missing,
        "test_images": missing,
        "test_labels": missing,
    }
    result = runner.invoke(app, ["train-baseline", "--config", str(_write(tmp_path, cfg)), "--out", str(tmp_path / "exp")])
    assert result.exit_code == 2


def test_invalid_method_exits_with_config_code(tmp_path):
    """Unknown grid methods are rejected before any work starts."""
    cfg = _tiny()
    cfg["grid"]["runs"][0]["method"] = "dropout"
    result = runner.invoke(app, ["run", "--dry-run", "--config", str(_write(tmp_path, cfg))])
    assert result.exit_code == 2


def test_mismatched_model_input_exits_with_config_code(tmp_path):
    """The model input must match the crop."""
    cfg = _tiny()
    cfg["model"]["input_shape"] = [10, 10, 1]
    result = runner.invoke(app, ["run", "--dry-run", "--config", str(_write(tmp_path, cfg))])
    assert result.exit_code == 2


def test_invalid_distortion_argument(tmp_path):
    """A malformed distortion argument exits with the config code."""
    result = runner.invoke(app, ["distort", "blur:1", "--config", str(_write(tmp_path, _tiny())), "--out", str(tmp_path / "exp")])
    assert result.exit_code == 2


def test_report_on_empty_experiment(tmp_path):
    """Reporting before any training is a data error."""
    result = runner.invoke(app, ["report", "--config", str(_write(tmp_path, _tiny())), "--out", str(tmp_path / "exp")])
    assert result.exit_code == 3


def test_run_without_baseline(tmp_path):
    """Grid runs need a baseline checkpoint."""
    result = runner.invoke(app, ["run", "--config", str(_write(tmp_path, _tiny())), "--out", str(tmp_path / "exp")])
    assert result.exit_code == 3


def test_end_to_end(tmp_path):
    """train-baseline, run, evaluate and report produce the experiment layout."""
    config = str(_write(tmp_path, _tiny()))
    out = tmp_path / "exp"
    for command in (["train-baseline"], ["run", "--jobs", "1"], ["evaluate", "--jobs", "1"], ["report"]):
        result = runner.invoke(app, [*command, "--config", config, "--out", str(out)])
        assert result.exit_code == 0, f"{command}: {result.output}"

    manifest = yaml.safe_load((out / "manifest.yaml").read_text(encoding="utf-8"))
    assert manifest["runs"]["baseline"]["status"] == "completed"
    assert manifest["runs"]["augment-gaussian0.1-p1"]["status"] == "completed"
    assert (out / "baseline" / "epoch_01.ckpt").exists()
    frame = pd.read_csv(out / "report" / "curves.csv")
    assert set(frame["run_id"]) == {"baseline", "augment-gaussian0.1-p1"}
    assert set(frame["test_distortion"]) == {"gaussian", "rotation"}
    assert (out / "report" / "gaussian_to_rotation.svg").exists()

    rerun = runner.invoke(app, ["run", "--config", config, "--out", str(out)])
    assert rerun.exit_code == 0
    assert "0 runs executed, 1 already complete" in rerun.output

    dump = runner.invoke(app, ["distort", "gaussian:0.2", "-n", "2", "--config", config, "--out", str(out)])
    assert dump.exit_code == 0, dump.output
    assert len(list((out / "debug" / "gaussian0.2").glob("*.png"))) == 2


def test_out_dir_precedence(tmp_path, monkeypatch):
    """--out beats the config file, which beats the environment, which beats the default."""
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert resolve_out_dir(tmp_path / "cfg", tmp_path / "flag") == tmp_path / "flag"
    assert resolve_out_dir(tmp_path / "cfg") == tmp_path / "cfg"
    assert resolve_out_dir(None) == tmp_path / "env"
    monkeypatch.delenv(OUT_ENV)
    assert resolve_out_dir(None) == DEFAULT_OUT


def test_load_config_overrides(tmp_path, monkeypatch):
    """Flags override the seed and output directory from the file."""
    monkeypatch.delenv(OUT_ENV, raising=False)
    path = _write(tmp_path, _tiny())
    cfg = load_config(path, seed=7, out=tmp_path / "elsewhere")
    assert cfg.seed == 7
    assert cfg.experiment.out == tmp_path / "elsewhere"
    assert load_config(path).experiment.out == DEFAULT_OUT
    assert cfg.evaluation_sweeps()["rotation"] == [0.0, 30.0, 90.0, 180.0]


def test_load_config_errors(tmp_path):
    """Missing files, bad YAML and unknown keys are config errors."""
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(bad)
    cfg = _tiny()
    cfg["training"]["warmup"] = 3
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, cfg))


def test_run_where_every_grid_point_fails(tmp_path):
    """A grid whose only point cannot train exits with the partial-failure code."""
    cfg = _tiny()
    cfg["grid"]["runs"] = [
        {
            "method": "augment",
            "distortions": ["thumbnail"],
            "axes": [
                {"name": "p", "start": 1.0, "end": 1.0, "points": 1},
                {"name": "thumbnail", "start": 20.0, "end": 20.0, "points": 1},
            ],
        }
    ]
    config = str(_write(tmp_path, cfg))
    out = tmp_path / "exp"
    assert runner.invoke(app, ["train-baseline", "--config", config, "--out", str(out)]).exit_code == 0
    result = runner.invoke(app, ["run", "--config", config, "--out", str(out)])
    assert result.exit_code == 5
    manifest = yaml.safe_load((out / "manifest.yaml").read_text(encoding="utf-8"))
    assert manifest["runs"]["augment-thumbnail20-p1"]["status"] == "failed"


def _without_wall_time(path: Path) -> str:
    if path.name == "run_log.csv":
        return pd.read_csv(path).drop(columns=["wall_time"]).to_csv(index=False)
    record = yaml.safe_load(path.read_text(encoding="utf-8"))
    for row in record["epochs"]:
        row.pop("wall_time")
    return yaml.safe_dump(record, sort_keys=True)


def _fingerprint(out: Path) -> dict:
    """Content hash of every experiment artefact, keyed by relative path."""
    digests = {}
    for path in sorted(out.rglob("*")):
        if path.suffix not in {".ckpt", ".csv", ".svg", ".txt", ".yaml"}:
            continue
        if path.name in {"run_log.csv", "record.yaml"}:
            payload = _without_wall_time(path).encode("utf-8")
        else:
            payload = path.read_bytes()
        digests[path.relative_to(out).as_posix()] = hashlib.sha256(payload).hexdigest()
    return digests


def test_cli_outputs_are_deterministic(tmp_path):
    """Two full pipelines with the same seed agree byte for byte, whatever the worker count."""
    cfg = _tiny()
    cfg["grid"]["runs"] += [
        {
            "method": "stability",
            "distortions": ["gaussian"],
            "axes": [
                {"name": "alpha", "start": 0.1, "end": 0.1, "points": 1},
                {"name": "gaussian", "start": 0.05, "end": 0.05, "points": 1},
            ],
        },
        {
            "method": "adversarial",
            "distortions": ["fgsm"],
            "axes": [
                {"name": "mu", "start": 0.5, "end": 0.5, "points": 1},
                {"name": "fgsm", "start": 0.01, "end": 0.01, "points": 1},
            ],
        },
    ]
    config = str(_write(tmp_path, cfg))
    fingerprints = []
    for name, jobs in (("first", "2"), ("second", "1")):
        out = tmp_path / name
        for command in (["train-baseline"], ["run", "--jobs", jobs], ["evaluate", "--jobs", jobs], ["report"]):
            result = runner.invoke(app, [*command, "--config", config, "--out", str(out)])
            assert result.exit_code == 0, f"{name} {command}: {result.output}"
        fingerprints.append(_fingerprint(out))

    first, second = fingerprints
    assert "report/gaussian_to_gaussian.svg" in first
    assert sum(key.endswith(".ckpt") for key in first) >= 4
    assert first.keys() == second.keys()
    assert [key for key in first if first[key] != second[key]] == []
