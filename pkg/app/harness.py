"""
Grid execution, experiment bookkeeping and robustness evaluation.

An experiment is a directory:

    manifest.yaml              experiment id, grid specs, run statuses
    baseline/                  epoch checkpoints, run_log.csv, record.yaml, curves.csv
    runs/<run_id>/             same layout per grid run
    report/                    curves.csv, SVG figures, summary.txt
"""

import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tenacity import retry, retry_if_exception_type, stop_after_delay, wait_exponential

from app.checkpoint import Checkpoint, load_checkpoint
from app.data import ChannelStats, PreparedSplit, normalize
from app.distortions import (
    KINDS,
    ClassifierContext,
    DistortionSpec,
    compose,
    identity_level,
    practical_level,
    training_range,
)
from app.errors import DataError, DistortionError, StableTrainError
from app.nn import ModelParams, predict_labels
from app.rng import EVALUATE, RngStream
from app.training import METHOD_PARAMETER, RunRecord, TrainConfig, TrainingData, train

# Configure logging
logger = logging.getLogger(__name__)

Scale = Literal["linear", "log"]

# coefficient ranges per method: (start, end, points, scale)
METHOD_RANGES: Dict[str, Tuple[float, float, int, str]] = {
    "stability": (0.01, 10.0, 3, "log"),
    "stability_sym": (0.01, 10.0, 3, "log"),
    "augment": (0.5, 1.0, 2, "linear"),
    "adversarial": (0.5, 0.5, 1, "linear"),
}
CURVE_COLUMNS = ["test_distortion", "intensity", "accuracy"]


def grid_points(start: float, end: float, n: int, scale: str = "linear") -> List[float]:
    """
    Inclusive arithmetic (linear) or geometric (log) progression.

    Args:
        start: First value
        end: Last value
        n: Number of points, n = 1 gives [start]
        scale: "linear" or "log"

    Returns:
        List of n values
    """
    if n < 1:
        raise ValueError(f"grid_points: need at least one point, got {n}")
    if scale not in ("linear", "log"):
        raise ValueError(f"grid_points: scale must be linear or log, got {scale!r}")
    if scale == "log" and (start <= 0 or end <= 0):
        raise ValueError(f"grid_points: log scale needs positive endpoints, got ({start}, {end})")
    if n == 1:
        return [float(start)]
    values = []
    for i in range(n):
        t = i / (n - 1)
        if scale == "linear":
            values.append(start + (end - start) * t)
        else:
            values.append(start * (end / start) ** t)
    values[0], values[-1] = float(start), float(end)
    return values


class GridAxis(BaseModel):
    """One hyperparameter axis: a method coefficient or a distortion kind."""

    model_config = ConfigDict(extra="forbid")

    name: str
    start: float
    end: float
    points: int = Field(ge=1)
    scale: Scale = "linear"

    @model_validator(mode="after")
    def _positive_log(self) -> "GridAxis":
        if self.scale == "log" and (self.start <= 0 or self.end <= 0):
            raise ValueError(f"axis {self.name}: log scale needs positive endpoints")
        return self

    def values(self) -> List[float]:
        values = grid_points(self.start, self.end, self.points, self.scale)
        if self.name in ("jpeg", "thumbnail", "crop"):
            return [float(round(v)) for v in values]
        return values


class GridSpec(BaseModel):
    """Cartesian grid of stabilized runs for one method and its train distortion(s)."""

    model_config = ConfigDict(extra="forbid")

    method: Literal["stability", "stability_sym", "augment", "adversarial"]
    distortions: List[Literal["gaussian", "jpeg", "thumbnail", "fgsm", "rotation", "crop"]] = Field(min_length=1)
    axes: List[GridAxis]

    @model_validator(mode="after")
    def _axes_cover_parameters(self) -> "GridSpec":
        names = [axis.name for axis in self.axes]
        expected = [METHOD_PARAMETER[self.method], *self.distortions]
        if sorted(names) != sorted(expected):
            raise ValueError(f"grid for {self.method} over {self.distortions} needs axes {expected}, got {names}")
        if len(set(self.distortions)) != len(self.distortions):
            raise ValueError(f"distortion kinds repeat in {self.distortions}")
        if self.method == "adversarial" and self.distortions != ["fgsm"]:
            raise ValueError("adversarial grids train against fgsm only")
        return self

    @classmethod
    def default(
        cls,
        method: str,
        distortions: Sequence[str],
        crop_side: int,
        resize_side: int,
        overrides: Sequence[GridAxis] = (),
    ) -> "GridSpec":
        """Grid over the reference ranges, rescaled to the pipeline; overrides replace axes by name."""
        given = {axis.name: axis for axis in overrides}
        coefficient = METHOD_PARAMETER[method]
        start, end, points, scale = METHOD_RANGES[method]
        axes = [given.get(coefficient, GridAxis(name=coefficient, start=start, end=end, points=points, scale=scale))]
        for kind in distortions:
            start, end, points, scale = training_range(kind, crop_side, resize_side)
            axes.append(given.get(kind, GridAxis(name=kind, start=start, end=end, points=points, scale=scale)))
        return cls(method=method, distortions=list(distortions), axes=axes)

    def points(self) -> List[Dict[str, float]]:
        names = [axis.name for axis in self.axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(axis.values() for axis in self.axes))]

    def configs(self, **settings) -> List[TrainConfig]:
        """One TrainConfig per grid point; settings carry epochs, batch size, lr and so on."""
        coefficient = METHOD_PARAMETER[self.method]
        configs = []
        for point in self.points():
            specs = [DistortionSpec(kind=kind, parameter=point[kind]) for kind in self.distortions]
            distortion = specs[0] if len(specs) == 1 else compose(*specs)
            configs.append(TrainConfig(method=self.method, distortion=distortion, **{coefficient: point[coefficient]}, **settings))
        return configs

    def describe(self) -> str:
        axes = ", ".join(f"{axis.name}={[f'{v:g}' for v in axis.values()]}" for axis in self.axes)
        return f"{self.method} x {'+'.join(self.distortions)}: {axes}"


class ManifestLocked(Exception):
    """Another process or thread holds the manifest lock."""


class Experiment:
    """Experiment directory with a manifest guarded by a lock file."""

    def __init__(self, root: Path, experiment_id: str = "experiment"):
        self.root = Path(root)
        self.experiment_id = experiment_id
        self.manifest_path = self.root / "manifest.yaml"
        self.lock_path = self.root / "manifest.lock"
        self.baseline_dir = self.root / "baseline"
        self.runs_dir = self.root / "runs"
        self.report_dir = self.root / "report"

    def run_dir(self, run_id: str) -> Path:
        if run_id == "baseline":
            return self.baseline_dir
        return self.runs_dir / run_id

    @retry(
        retry=retry_if_exception_type(ManifestLocked),
        stop=stop_after_delay(60),
        wait=wait_exponential(multiplier=0.01, max=0.5),
        reraise=True,
    )
    def _acquire(self) -> int:
        try:
            return os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ManifestLocked(str(self.lock_path)) from e

    @contextmanager
    def locked(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = self._acquire()
        except ManifestLocked as e:
            raise DataError(f"manifest lock {e} is held; remove it if no other run is active") from e
        try:
            yield
        finally:
            os.close(fd)
            self.lock_path.unlink(missing_ok=True)

    def read_manifest(self) -> Dict:
        if not self.manifest_path.exists():
            return {"experiment_id": self.experiment_id, "grids": [], "runs": {}}
        try:
            with open(self.manifest_path, "r", encoding="utf-8") as f:
                manifest = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise DataError(f"{self.manifest_path}: unreadable manifest ({type(e).__name__} - {e})") from e
        manifest.setdefault("experiment_id", self.experiment_id)
        manifest.setdefault("grids", [])
        manifest.setdefault("runs", {})
        return manifest

    def _write_manifest(self, manifest: Dict) -> None:
        tmp = self.manifest_path.with_suffix(".yaml.tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            yaml.safe_dump(manifest, f, sort_keys=True)
        os.replace(tmp, self.manifest_path)

    def update_run(self, run_id: str, **fields) -> None:
        with self.locked():
            manifest = self.read_manifest()
            manifest["runs"].setdefault(run_id, {}).update(fields)
            self._write_manifest(manifest)

    def register_grid(self, grid: GridSpec) -> None:
        with self.locked():
            manifest = self.read_manifest()
            entry = grid.model_dump(mode="json")
            if entry not in manifest["grids"]:
                manifest["grids"].append(entry)
            self._write_manifest(manifest)

    def is_complete(self, run_id: str) -> bool:
        status = self.read_manifest()["runs"].get(run_id, {}).get("status")
        return status == "completed" and (self.run_dir(run_id) / "record.yaml").exists()

    def completed_runs(self) -> List[str]:
        """Completed run ids, baseline first, the rest sorted."""
        runs = self.read_manifest()["runs"]
        done = sorted(run_id for run_id in runs if run_id != "baseline" and self.is_complete(run_id))
        return (["baseline"] if self.is_complete("baseline") else []) + done

    def load_record(self, run_id: str) -> RunRecord:
        path = self.run_dir(run_id) / "record.yaml"
        if not path.exists():
            raise DataError(f"no record for run {run_id} at {path}")
        return RunRecord.load(path)

    def load_selected(self, run_id: str) -> Checkpoint:
        """Checkpoint of the early-stopping epoch of a completed run."""
        record = self.load_record(run_id)
        if record.selected_checkpoint is None:
            raise DataError(f"run {run_id} saved no checkpoints")
        return load_checkpoint(self.run_dir(run_id) / record.selected_checkpoint)


def record_entry(record: RunRecord) -> Dict:
    """Manifest fields describing a finished run."""
    cfg = record.config
    return {
        "status": "completed",
        "method": cfg.method,
        "train_distortion": cfg.distortion.label() if cfg.distortion is not None else "none",
        "hyperparams": {k: float(v) for k, v in sorted(cfg.hyperparams().items())},
        "selected_epoch": record.selected_epoch,
        "val_acc": float(record.epochs[record.selected_epoch - 1].val_acc),
    }


@dataclass
class GridOutcome:
    executed: List[RunRecord] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)


def run_grid(
    grid: GridSpec,
    data: TrainingData,
    baseline: Checkpoint,
    experiment: Experiment,
    jobs: int = 1,
    **settings,
) -> GridOutcome:
    """
    Train one run per grid point, skipping runs that already completed.

    A failing run is recorded as failed in the manifest; the remaining
    points still run.

    Args:
        grid: Grid to execute
        data: Prepared training data
        baseline: Initialization checkpoint for every run
        experiment: Experiment directory
        jobs: Concurrent runs
        **settings: TrainConfig schedule fields (epochs, batch_size, lr, ...)

    Returns:
        Executed records, skipped run ids and failures by run id
    """
    experiment.register_grid(grid)
    outcome = GridOutcome()
    pending: List[TrainConfig] = []
    for cfg in grid.configs(**settings):
        if experiment.is_complete(cfg.run_id()):
            outcome.skipped.append(cfg.run_id())
        else:
            pending.append(cfg)
    logger.info(f"Grid {grid.describe()}: {len(pending)} to run, {len(outcome.skipped)} already complete")

    def execute(cfg: TrainConfig) -> Optional[RunRecord]:
        run_id = cfg.run_id()
        experiment.update_run(run_id, status="running")
        try:
            record = train(cfg, data, baseline, experiment.run_dir(run_id))
        except Exception as e:
            if isinstance(e, (StableTrainError, ValueError)):
                logger.error(f"Run {run_id} failed: {type(e).__name__} - {e}")
            else:
                logger.exception(f"Run {run_id} failed unexpectedly: {type(e).__name__} - {e}")
            experiment.update_run(run_id, status="failed", error=f"{type(e).__name__} - {e}")
            outcome.failed[run_id] = f"{type(e).__name__} - {e}"
            return None
        experiment.update_run(run_id, **record_entry(record))
        return record

    if jobs > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(execute, pending))
    else:
        results = [execute(cfg) for cfg in pending]
    outcome.executed = [r for r in results if r is not None]
    return outcome


class RobustnessCurve(BaseModel):
    """Test accuracy of one run against one test distortion, by intensity."""

    run_id: str
    test_distortion: str
    intensities: List[float]
    accuracies: List[float]

    @model_validator(mode="after")
    def _well_formed(self) -> "RobustnessCurve":
        if len(self.intensities) != len(self.accuracies):
            raise ValueError(f"curve {self.run_id}: {len(self.intensities)} intensities, {len(self.accuracies)} accuracies")
        if any(b <= a for a, b in zip(self.intensities, self.intensities[1:])):
            raise ValueError(f"curve {self.run_id}: intensities must be strictly increasing")
        if any(not 0.0 <= acc <= 1.0 for acc in self.accuracies):
            raise ValueError(f"curve {self.run_id}: accuracies must lie in [0, 1]")
        return self

    def accuracy_at(self, intensity: float) -> float:
        for value, acc in zip(self.intensities, self.accuracies):
            if np.isclose(value, intensity, rtol=1e-9, atol=1e-12):
                return acc
        raise KeyError(f"curve {self.run_id} has no intensity {intensity:g}")


class Envelope(BaseModel):
    intensities: List[float]
    lower: List[float]
    upper: List[float]

    def width(self, intensity: float) -> float:
        i = int(np.argmin(np.abs(np.asarray(self.intensities) - intensity)))
        return self.upper[i] - self.lower[i]


def sweep_intensities(
    kind: str,
    crop_side: int,
    resize_side: int,
    extra: Sequence[float] = (),
) -> List[float]:
    """Training range of the kind plus its identity and practical points, ascending."""
    start, end, points, scale = training_range(kind, crop_side, resize_side)
    values = set(GridAxis(name=kind, start=start, end=end, points=points, scale=scale).values())
    values.add(identity_level(kind, crop_side))
    values.add(practical_level(kind, crop_side, resize_side))
    values.update(float(v) for v in extra)
    merged: List[float] = []
    for value in sorted(values):
        if merged and np.isclose(value, merged[-1], rtol=1e-9, atol=1e-12):
            continue
        merged.append(value)
    return merged


def _check_intensity(kind: str, value: float, crop_side: int, margin: int) -> DistortionSpec:
    try:
        spec = DistortionSpec(kind=kind, parameter=value)
    except ValueError as e:
        raise DistortionError(f"invalid {kind} intensity {value:g}: {e}") from e
    if kind == "thumbnail" and value > crop_side:
        raise DistortionError(f"thumbnail intensity {value:g} exceeds the crop side {crop_side}")
    if kind == "crop" and value > margin:
        raise DistortionError(f"crop intensity {value:g} exceeds the resize margin {margin}")
    return spec


def evaluate_curve(
    ckpt: Checkpoint,
    kind: str,
    intensities: Sequence[float],
    test: PreparedSplit,
    stats: ChannelStats,
    rng: RngStream,
    run_id: str = "",
    batch_size: int = 256,
) -> RobustnessCurve:
    """
    Top-1 test accuracy of a checkpoint at each intensity of one distortion.

    Every sample draws from the same evaluation stream at every intensity
    and for every model. The identity intensity evaluates undistorted data.
    """
    if kind not in KINDS:
        raise DistortionError(f"unknown test distortion {kind!r}, expected one of {KINDS}")
    params: ModelParams = ckpt.model
    dtype = params.config.dtype
    crop_side = test.cfg.crop_side
    specs = [_check_intensity(kind, float(v), crop_side, test.cfg.margin) for v in intensities]
    ctx = ClassifierContext(params, stats.mean, stats.std) if kind == "fgsm" else None
    streams = rng.child(EVALUATE, KINDS.index(kind))

    accuracies = []
    for spec in specs:
        if len(test) == 0:
            accuracies.append(0.0)
            continue
        identity = spec.parameter == identity_level(kind, crop_side)
        correct = 0
        for start in range(0, len(test), batch_size):
            indices = np.arange(start, min(start + batch_size, len(test)))
            if identity:
                images = test.centered[indices]
            else:
                rngs = [streams.child(int(i)) for i in indices]
                images = test.batch(indices, spec, rngs, ctx, fill=stats.mean)
            predictions = predict_labels(params, normalize(images, stats, dtype), batch_size)
            correct += int((predictions == test.labels[indices]).sum())
        accuracies.append(correct / len(test))
    logger.info(f"Evaluated {run_id or 'model'} on {kind}: " + ", ".join(f"{v:g}->{a:.3f}" for v, a in zip(intensities, accuracies)))
    return RobustnessCurve(
        run_id=run_id,
        test_distortion=kind,
        intensities=[float(v) for v in intensities],
        accuracies=accuracies,
    )


def select_best_worst(curves: Sequence[RobustnessCurve], intensity: float) -> Tuple[str, str]:
    """
    Runs with the highest and lowest accuracy at one intensity.

    Only that intensity's column is consulted; ties go to the lower run id.

    Returns:
        (best run id, worst run id)
    """
    if not curves:
        raise ValueError("select_best_worst: no curves")
    ordered = sorted(curves, key=lambda c: c.run_id)
    scores = [c.accuracy_at(intensity) for c in ordered]
    best = ordered[int(np.argmax(scores))]
    worst = ordered[int(np.argmin(scores))]
    return best.run_id, worst.run_id


def envelope(curves: Sequence[RobustnessCurve]) -> Envelope:
    """Pointwise min / max of curves sharing one intensity list."""
    if not curves:
        raise ValueError("envelope: no curves")
    intensities = curves[0].intensities
    for curve in curves[1:]:
        if curve.intensities != intensities:
            raise ValueError(f"envelope: curve {curve.run_id} has a different intensity list")
    table = np.asarray([c.accuracies for c in curves], dtype=np.float64)
    return Envelope(intensities=list(intensities), lower=table.min(axis=0).tolist(), upper=table.max(axis=0).tolist())


def save_curves(curves: Sequence[RobustnessCurve], path: Path) -> None:
    rows = [
        {"test_distortion": c.test_distortion, "intensity": v, "accuracy": a}
        for c in curves
        for v, a in zip(c.intensities, c.accuracies)
    ]
    pd.DataFrame(rows, columns=CURVE_COLUMNS).to_csv(path, index=False, float_format="%.10g")


def load_curves(path: Path, run_id: str) -> List[RobustnessCurve]:
    if not path.exists():
        return []
    frame = pd.read_csv(path)
    curves = []
    for kind, group in frame.groupby("test_distortion", sort=True):
        curves.append(RobustnessCurve(
            run_id=run_id,
            test_distortion=str(kind),
            intensities=group["intensity"].astype(float).tolist(),
            accuracies=group["accuracy"].astype(float).tolist(),
        ))
    return curves


def _same_intensities(stored: Sequence[float], wanted: Sequence[float]) -> bool:
    return len(stored) == len(wanted) and bool(np.allclose(stored, wanted, rtol=1e-9, atol=0.0))


def evaluate_experiment(
    experiment: Experiment,
    test: PreparedSplit,
    stats: ChannelStats,
    intensities: Dict[str, List[float]],
    eval_seed: int,
    jobs: int = 1,
    batch_size: int = 256,
    force: bool = False,
) -> Dict[str, List[RobustnessCurve]]:
    """
    Evaluate every completed run against every test distortion.

    Results land in each run's curves.csv; runs whose curves already cover
    the requested distortions are not re-evaluated unless forced.
    """
    run_ids = experiment.completed_runs()
    if not run_ids:
        raise DataError(f"no runs in {experiment.root}; train a baseline first")
    rng = RngStream(eval_seed)
    kinds = sorted(intensities)

    def evaluate(run_id: str) -> List[RobustnessCurve]:
        path = experiment.run_dir(run_id) / "curves.csv"
        existing = {c.test_distortion: c for c in load_curves(path, run_id)}
        if not force and all(k in existing and _same_intensities(existing[k].intensities, intensities[k]) for k in kinds):
            return [existing[k] for k in kinds]
        ckpt = experiment.load_selected(run_id)
        curves = [evaluate_curve(ckpt, k, intensities[k], test, stats, rng, run_id, batch_size) for k in kinds]
        save_curves(curves, path)
        return curves

    if jobs > 1 and len(run_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(evaluate, run_ids))
    else:
        results = [evaluate(run_id) for run_id in run_ids]
    return dict(zip(run_ids, results))
