"""Command-line entry point: baseline training, grid runs, evaluation, reports."""

import functools
import logging
import os
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import typer
from PIL import Image
from rich.console import Console
from rich.logging import RichHandler

from app.config import DEFAULT_CONFIG, ExperimentConfig, load_config
from app.data import PreparedSplit, check_labels, load_splits
from app.distortions import ClassifierContext, DistortionSpec
from app.errors import ConfigError, DataError, PartialGridFailure, StableTrainError
from app.harness import Experiment, evaluate_experiment, record_entry, run_grid
from app.report import write_report
from app.rng import EVALUATE, RngStream
from app.training import TrainConfig, TrainingData, train_baseline

# Configure logging
logger = logging.getLogger(__name__)

app = typer.Typer(help="Stability training, augmentation and adversarial training at desk scale.", no_args_is_help=True)
console = Console()
err_console = Console(stderr=True)

CONFIG_OPTION = typer.Option(DEFAULT_CONFIG, "--config", "-c", help="Experiment YAML file.")
SEED_OPTION = typer.Option(None, "--seed", help="Overrides experiment.seed.")
OUT_OPTION = typer.Option(None, "--out", help="Experiment directory; overrides experiment.out and $STABLETRAIN_OUT.")
JOBS_OPTION = typer.Option(None, "--jobs", "-j", min=1, help="Concurrent runs (default: experiment.jobs or all cores).")


def _guarded(command):
    """Map toolkit errors to their exit codes."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except StableTrainError as e:
            err_console.print(f"❌ {e.category} error: {e}", markup=False, highlight=False)
            raise typer.Exit(code=e.exit_code)
        except ValueError as e:
            err_console.print(f"❌ config error: {type(e).__name__} - {e}", markup=False, highlight=False)
            raise typer.Exit(code=ConfigError.exit_code)

    return wrapper


@app.callback()
def main(log_level: str = typer.Option("INFO", "--log-level", help="DEBUG, INFO, WARNING or ERROR.")):
    logging.basicConfig(
        level=log_level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _experiment(cfg: ExperimentConfig) -> Experiment:
    return Experiment(cfg.experiment.out, cfg.experiment.id)


def _prepare(cfg: ExperimentConfig) -> Tuple[TrainingData, PreparedSplit]:
    splits = load_splits(cfg.data, cfg.seed)
    for split in (splits.train, splits.val, splits.test):
        check_labels(split, cfg.model.num_classes)
        if split.images.shape[3] != cfg.model.input_shape[2]:
            raise DataError(f"{split.split} images have {split.images.shape[3]} channels, model expects {cfg.model.input_shape[2]}")
    return TrainingData.from_splits(splits, cfg.pipeline), PreparedSplit(splits.test, cfg.pipeline)


def _jobs(cfg: ExperimentConfig, jobs: Optional[int]) -> int:
    return jobs or cfg.experiment.jobs or os.cpu_count() or 1


@app.command("train-baseline")
@_guarded
def cmd_train_baseline(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
):
    """Train the baseline model on undistorted data."""
    cfg = load_config(config, seed, out)
    experiment = _experiment(cfg)
    data, _ = _prepare(cfg)
    schedule = cfg.baseline
    train_cfg = TrainConfig(
        method="baseline",
        epochs=schedule.epochs,
        batch_size=schedule.batch_size,
        lr=schedule.lr,
        momentum=schedule.momentum,
        seed=cfg.seed,
    )
    experiment.update_run("baseline", status="running")
    try:
        record = train_baseline(train_cfg, data, cfg.model, out_dir=experiment.baseline_dir)
    except StableTrainError as e:
        experiment.update_run("baseline", status="failed", error=f"{type(e).__name__} - {e}")
        raise
    experiment.update_run("baseline", **record_entry(record))
    val_acc = record.epochs[record.selected_epoch - 1].val_acc
    console.print(f"✅ Baseline: selected epoch {record.selected_epoch}, val accuracy {val_acc:.4f}")


@app.command("run")
@_guarded
def cmd_run(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    jobs: Optional[int] = JOBS_OPTION,
    dry_run: bool = typer.Option(False, "--dry-run", help="Print the resolved grids without training."),
):
    """Run the configured ST / DA / AT grids from the baseline checkpoint."""
    cfg = load_config(config, seed, out)
    grids = cfg.grids()
    if dry_run:
        total = 0
        for grid in grids:
            count = len(grid.points())
            total += count
            console.print(f"{grid.describe()} -> {count} points", markup=False)
        console.print(f"{total} runs in {len(grids)} grids")
        return

    experiment = _experiment(cfg)
    if not experiment.is_complete("baseline"):
        raise DataError(f"no baseline checkpoint in {experiment.root}; run train-baseline first")
    baseline = experiment.load_selected("baseline")
    data, _ = _prepare(cfg)
    executed, skipped, failed = 0, 0, {}
    for grid in grids:
        outcome = run_grid(grid, data, baseline, experiment, _jobs(cfg, jobs), **cfg.run_settings(grid.method))
        executed += len(outcome.executed)
        skipped += len(outcome.skipped)
        failed.update(outcome.failed)
    console.print(f"{executed} runs executed, {skipped} already complete, {len(failed)} failed")
    if failed:
        summary = "; ".join(f"{run_id}: {error}" for run_id, error in sorted(failed.items()))
        if executed == 0 and skipped == 0:
            raise PartialGridFailure(f"every grid run failed: {summary}")
        raise PartialGridFailure(f"{len(failed)} grid runs failed: {summary}")


@app.command("evaluate")
@_guarded
def cmd_evaluate(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    jobs: Optional[int] = JOBS_OPTION,
    force: bool = typer.Option(False, "--force", help="Re-evaluate runs that already have curves."),
):
    """Evaluate every completed run against every test distortion."""
    cfg = load_config(config, seed, out)
    experiment = _experiment(cfg)
    if not experiment.completed_runs():
        raise DataError(f"no runs in {experiment.root}; train a baseline first")
    data, test = _prepare(cfg)
    curves = evaluate_experiment(
        experiment,
        test,
        data.stats,
        cfg.evaluation_sweeps(),
        cfg.experiment.eval_seed,
        _jobs(cfg, jobs),
        cfg.evaluation.batch_size,
        force,
    )
    count = sum(len(c) for c in curves.values())
    console.print(f"✅ {count} curves for {len(curves)} runs")


@app.command("report")
@_guarded
def cmd_report(
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
):
    """Write curves.csv, SVG figures and the summary table under report/."""
    cfg = load_config(config, seed, out)
    paths = write_report(_experiment(cfg), cfg.report, cfg.pipeline.crop_side, cfg.pipeline.resize_side)
    for path in paths:
        console.print(str(path), markup=False)


@app.command("distort")
@_guarded
def cmd_distort(
    distortion: str = typer.Argument(..., help="kind:value, or kind:value+kind:value for a composition."),
    config: Path = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Optional[Path] = OUT_OPTION,
    count: int = typer.Option(8, "--count", "-n", min=1, help="Number of test images to dump."),
    image_format: str = typer.Option("png", "--format", help="png or ppm."),
):
    """Dump distorted test images for inspection."""
    if image_format not in ("png", "ppm"):
        raise ConfigError(f"--format must be png or ppm, got {image_format!r}")
    cfg = load_config(config, seed, out)
    spec = DistortionSpec.parse(distortion)
    data, test = _prepare(cfg)
    ctx = None
    if "fgsm" in spec.kinds():
        experiment = _experiment(cfg)
        if not experiment.is_complete("baseline"):
            raise DataError("fgsm images need a trained baseline; run train-baseline first")
        baseline = experiment.load_selected("baseline")
        ctx = ClassifierContext(baseline.model, data.stats.mean, data.stats.std)

    indices = np.arange(min(count, len(test)))
    rngs = RngStream(cfg.seed).child(EVALUATE).split(len(indices))
    images = test.batch(indices, spec, rngs, ctx, fill=data.stats.mean)
    target = Path(cfg.experiment.out) / "debug" / spec.label().replace(":", "").replace("+", "_")
    target.mkdir(parents=True, exist_ok=True)
    for i, img in zip(indices, images):
        pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        if pixels.shape[2] == 1:
            pixels = pixels[:, :, 0]
        Image.fromarray(pixels).save(target / f"{i:04d}_label{test.labels[i]}.{image_format}")
    console.print(f"✅ {len(indices)} images written to {target}", markup=False)


if __name__ == "__main__":
    app()
