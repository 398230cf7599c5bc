"""Loads the experiment configuration from YAML and .env."""

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.data import DataConfig, PipelineConfig
from app.distortions import KINDS
from app.errors import ConfigError
from app.harness import GridAxis, GridSpec, sweep_intensities
from app.nn import ModelConfig
from app.report import ReportConfig

load_dotenv()  # Load .env into environment variables

# Configure logging
logger = logging.getLogger(__name__)

BASE = Path(__file__).parent.parent  # app/.. => project root
DEFAULT_CONFIG = BASE / "config" / "experiment.yaml"
DEFAULT_OUT = Path("experiments")
OUT_ENV = "STABLETRAIN_OUT"

DistortionKind = Literal["gaussian", "jpeg", "thumbnail", "fgsm", "rotation", "crop"]


def get_env_var(key: str, default: Optional[str] = None) -> Optional[str]:
    """
    Get an environment variable, falling back to a default.
    """
    value = os.getenv(key)
    if not value:
        return default
    logger.info(f"✅ Loaded environment variable: {key}")
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    id: str = "desk"
    out: Optional[Path] = None
    seed: int = 0
    eval_seed: int = 1234
    jobs: Optional[int] = Field(None, ge=1)


class ScheduleSection(_Section):
    """Optimizer schedule shared by the runs of one phase."""

    epochs: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


class TrainingSection(ScheduleSection):
    detach_reference: bool = False
    draw: Literal["per_sample", "per_batch"] = "per_sample"


class GridEntry(_Section):
    """A method trained against one or more distortion kinds; axes override the default ranges."""

    method: Literal["stability", "stability_sym", "augment", "adversarial"]
    distortions: List[DistortionKind] = Field(min_length=1)
    axes: List[GridAxis] = Field(default_factory=list)


class GridSection(_Section):
    runs: List[GridEntry] = Field(default_factory=list)
    augment_epochs: Optional[int] = Field(None, ge=1)


class EvaluationSection(_Section):
    distortions: List[DistortionKind] = Field(default_factory=lambda: list(KINDS))
    intensities: Dict[DistortionKind, List[float]] = Field(default_factory=dict)
    batch_size: int = Field(256, ge=1)


class ExperimentConfig(_Section):
    """Everything an experiment needs, validated before any work starts."""

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    data: DataConfig = Field(default_factory=DataConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    baseline: ScheduleSection = Field(default_factory=lambda: ScheduleSection(epochs=15))
    training: TrainingSection = Field(default_factory=TrainingSection)
    grid: GridSection = Field(default_factory=GridSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    report: ReportConfig = Field(default_factory=ReportConfig)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        crop = self.pipeline.crop_side
        if tuple(self.model.input_shape[:2]) != (crop, crop):
            raise ValueError(f"model input {tuple(self.model.input_shape)} does not match the {crop}x{crop} crop")
        if self.data.source == "synthetic" and self.data.synthetic.channels != self.model.input_shape[2]:
            raise ValueError(
                f"synthetic images have {self.data.synthetic.channels} channels, model expects {self.model.input_shape[2]}"
            )
        if self.data.source == "synthetic" and self.data.synthetic.num_classes != self.model.num_classes:
            raise ValueError(
                f"synthetic data has {self.data.synthetic.num_classes} classes, model has {self.model.num_classes}"
            )
        self.grids()
        return self

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def grids(self) -> List[GridSpec]:
        pipeline = self.pipeline
        return [
            GridSpec.default(entry.method, entry.distortions, pipeline.crop_side, pipeline.resize_side, entry.axes)
            for entry in self.grid.runs
        ]

    def run_settings(self, method: str) -> Dict:
        """TrainConfig schedule fields for a grid method."""
        training = self.training
        epochs = training.epochs
        if method == "augment" and self.grid.augment_epochs is not None:
            epochs = self.grid.augment_epochs
        return {
            "epochs": epochs,
            "batch_size": training.batch_size,
            "lr": training.lr,
            "momentum": training.momentum,
            "seed": self.seed,
            "detach_reference": training.detach_reference,
            "draw": training.draw,
        }

    def evaluation_sweeps(self) -> Dict[str, List[float]]:
        """Intensity sweep per evaluated distortion: configured, or the defaults."""
        pipeline = self.pipeline
        sweeps = {}
        for kind in self.evaluation.distortions:
            if kind in self.evaluation.intensities:
                sweeps[kind] = sorted({float(v) for v in self.evaluation.intensities[kind]})
            else:
                extra = self.report.extra_levels.get(kind, [])
                sweeps[kind] = sweep_intensities(kind, pipeline.crop_side, pipeline.resize_side, extra)
        return sweeps


def resolve_out_dir(config_out: Optional[Path], flag: Optional[Path] = None) -> Path:
    """Output directory precedence: flag, config file, STABLETRAIN_OUT, default."""
    if flag is not None:
        return Path(flag)
    if config_out is not None:
        return Path(config_out)
    env = get_env_var(OUT_ENV)
    if env:
        return Path(env)
    return DEFAULT_OUT


def load_config(path: Optional[Path] = None, seed: Optional[int] = None, out: Optional[Path] = None) -> ExperimentConfig:
    """
    Load and validate an experiment config; flags override file values.

    Args:
        path: YAML file, defaults to config/experiment.yaml
        seed: --seed override
        out: --out override

    Returns:
        Validated configuration with the output directory resolved
    """
    path = Path(path) if path is not None else DEFAULT_CONFIG
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML ({type(e).__name__} - {e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of sections, got {type(raw).__name__}")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e

    experiment = cfg.experiment.model_copy(update={"out": resolve_out_dir(cfg.experiment.out, out)})
    if seed is not None:
        experiment = experiment.model_copy(update={"seed": seed})
    return cfg.model_copy(update={"experiment": experiment})
