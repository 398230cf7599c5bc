"""Report emission: curves CSV, per train->test SVG figures and a summary table."""

import io
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console
from rich.table import Table

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from app.distortions import KINDS, identity_level, practical_level
from app.errors import DataError
from app.harness import Experiment, RobustnessCurve, envelope, load_curves, select_best_worst

# Configure logging
logger = logging.getLogger(__name__)

CSV_COLUMNS = ["run_id", "method", "train_distortion", "hyperparams", "test_distortion", "intensity", "accuracy"]
METHOD_ORDER = ["stability", "stability_sym", "augment", "adversarial"]
METHOD_LABELS = {
    "baseline": "baseline",
    "stability": "ST",
    "stability_sym": "ST-sym",
    "augment": "DA",
    "adversarial": "AT",
}
COLORS = {
    "baseline": "#222222",
    "stability": "#1f77b4",
    "stability_sym": "#9467bd",
    "augment": "#d62728",
    "adversarial": "#2ca02c",
}
ENVELOPE_METHODS = ("stability", "stability_sym")

SVG_HASHSALT = "stabletrain"


class Subset(BaseModel):
    """Restrict best/worst selection to runs of one method with fixed hyperparameters."""

    model_config = ConfigDict(extra="forbid")

    method: str
    hyperparams: Dict[str, float] = Field(default_factory=dict)

    def label(self) -> str:
        fixed = ",".join(f"{k}={v:g}" for k, v in sorted(self.hyperparams.items()))
        return f"{METHOD_LABELS.get(self.method, self.method)}[{fixed}]" if fixed else METHOD_LABELS.get(self.method, self.method)


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    log_x: List[str] = Field(default_factory=lambda: ["gaussian", "fgsm"])
    extra_levels: Dict[str, List[float]] = Field(default_factory=lambda: {"fgsm": [0.1]})
    subsets: List[Subset] = Field(default_factory=list)


class RunInfo(BaseModel):
    run_id: str
    method: str
    train_distortion: str
    hyperparams: Dict[str, float] = Field(default_factory=dict)

    @property
    def family(self) -> str:
        """Train distortion kinds without parameters, e.g. gaussian+rotation."""
        if self.train_distortion == "none":
            return "none"
        return "+".join(part.split(":")[0] for part in self.train_distortion.split("+"))

    def hyperparams_text(self) -> str:
        return ";".join(f"{k}={v:g}" for k, v in sorted(self.hyperparams.items()))


def collect(experiment: Experiment) -> Tuple[List[RunInfo], Dict[str, List[RobustnessCurve]]]:
    """Completed runs with their stored curves."""
    manifest = experiment.read_manifest()
    run_ids = experiment.completed_runs()
    if not run_ids:
        raise DataError(f"no runs in {experiment.root}; nothing to report")
    runs, curves = [], {}
    for run_id in run_ids:
        entry = manifest["runs"][run_id]
        runs.append(RunInfo(
            run_id=run_id,
            method=entry["method"],
            train_distortion=entry["train_distortion"],
            hyperparams=entry.get("hyperparams") or {},
        ))
        curves[run_id] = load_curves(experiment.run_dir(run_id) / "curves.csv", run_id)
    if not any(curves.values()):
        raise DataError(f"no evaluated curves in {experiment.root}; run evaluate first")
    return runs, curves


def curves_frame(runs: Sequence[RunInfo], curves: Dict[str, List[RobustnessCurve]]) -> pd.DataFrame:
    rows = []
    for run in runs:
        for curve in curves[run.run_id]:
            for intensity, acc in zip(curve.intensities, curve.accuracies):
                rows.append({
                    "run_id": run.run_id,
                    "method": run.method,
                    "train_distortion": run.train_distortion,
                    "hyperparams": run.hyperparams_text(),
                    "test_distortion": curve.test_distortion,
                    "intensity": intensity,
                    "accuracy": acc,
                })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def _curve(curves: Dict[str, List[RobustnessCurve]], run_id: str, kind: str) -> Optional[RobustnessCurve]:
    for curve in curves.get(run_id, []):
        if curve.test_distortion == kind:
            return curve
    return None


def _configure_matplotlib() -> None:
    # Fixed ids and no timestamp so a regenerated figure is byte-identical
    plt.rcParams["svg.hashsalt"] = SVG_HASHSALT
    plt.rcParams["svg.fonttype"] = "path"


def _x_scale(ax, intensities: Sequence[float], log: bool) -> None:
    if not log:
        return
    positive = [v for v in intensities if v > 0]
    if not positive:
        return
    if len(positive) == len(intensities):
        ax.set_xscale("log")
    else:
        # the identity level 0 stays on the axis
        ax.set_xscale("symlog", linthresh=min(positive))


def render_figure(
    family: str,
    kind: str,
    runs: Sequence[RunInfo],
    curves: Dict[str, List[RobustnessCurve]],
    practical: float,
    log_x: bool,
) -> Optional[Figure]:
    """Figure of one train distortion family against one test distortion, None without data."""
    baseline = _curve(curves, "baseline", kind)
    family_runs = [r for r in runs if r.family == family]
    reference = baseline or next((c for r in family_runs if (c := _curve(curves, r.run_id, kind))), None)
    if reference is None:
        return None

    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    try:
        if baseline is not None:
            ax.plot(baseline.intensities, baseline.accuracies, color=COLORS["baseline"], marker="o", label="baseline")
        for method in METHOD_ORDER:
            method_curves = [c for r in family_runs if r.method == method and (c := _curve(curves, r.run_id, kind))]
            if not method_curves:
                continue
            label = METHOD_LABELS[method]
            if method in ENVELOPE_METHODS:
                band = envelope(method_curves)
                ax.fill_between(band.intensities, band.lower, band.upper, color=COLORS[method], alpha=0.18, linewidth=0, label=f"{label} range")
            try:
                best, worst = select_best_worst(method_curves, practical)
            except KeyError as e:
                raise DataError(f"{kind} curves lack the practical level {practical:g}; add it to evaluation.intensities") from e
            by_id = {c.run_id: c for c in method_curves}
            ax.plot(by_id[best].intensities, by_id[best].accuracies, color=COLORS[method], marker="o", label=f"{label} best")
            if worst != best:
                ax.plot(by_id[worst].intensities, by_id[worst].accuracies, color=COLORS[method], marker="s", linestyle="--", label=f"{label} worst")
    except DataError:
        plt.close(fig)
        raise

    _x_scale(ax, reference.intensities, log_x)
    ax.axvline(practical, color="#7f7f7f", linestyle=":", label=f"practical {practical:g}")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel(f"{kind} intensity")
    ax.set_ylabel("accuracy")
    ax.set_title(f"{family} → {kind}")
    ax.legend(loc="center left", bbox_to_anchor=(1.02, 0.5), fontsize="small")
    fig.tight_layout()
    return fig


def _save_figure(path: Path, fig: Figure, failures: Dict[str, str]) -> Optional[Path]:
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
        return path
    except OSError as e:
        logger.error(f"Failed to write {path}: {type(e).__name__} - {e}")
        failures[path.name] = f"{type(e).__name__} - {e}"
        return None
    finally:
        plt.close(fig)


def _best_worst_cells(method_curves: List[RobustnessCurve], level: float) -> Tuple[str, str]:
    if not method_curves:
        return "-", "-"
    try:
        best, worst = select_best_worst(method_curves, level)
    except KeyError:
        return "n/a", "n/a"
    by_id = {c.run_id: c for c in method_curves}
    return (
        f"{by_id[best].accuracy_at(level):.3f} ({best})",
        f"{by_id[worst].accuracy_at(level):.3f} ({worst})",
    )


def summary_table(
    runs: Sequence[RunInfo],
    curves: Dict[str, List[RobustnessCurve]],
    kinds: Sequence[str],
    cfg: ReportConfig,
    crop_side: int,
    resize_side: int,
) -> str:
    """Best / worst accuracies at the selection levels as plain text."""
    table = Table(title="Best / worst models at the selection levels")
    for column in ("train", "test", "level", "baseline", "selection", "best", "worst", "range@identity"):
        table.add_column(column)
    families = sorted({r.family for r in runs if r.method != "baseline"})
    groups: List[Tuple[str, str, List[RunInfo]]] = []
    for family in families:
        family_runs = [r for r in runs if r.family == family]
        for method in METHOD_ORDER:
            members = [r for r in family_runs if r.method == method]
            if members:
                groups.append((family, METHOD_LABELS[method], members))
        for subset in cfg.subsets:
            members = [
                r for r in family_runs
                if r.method == subset.method and all(r.hyperparams.get(k) == v for k, v in subset.hyperparams.items())
            ]
            if members:
                groups.append((family, subset.label(), members))

    for kind in kinds:
        levels = [practical_level(kind, crop_side, resize_side), *cfg.extra_levels.get(kind, [])]
        baseline = _curve(curves, "baseline", kind)
        for level in levels:
            base_text = "-"
            if baseline is not None:
                try:
                    base_text = f"{baseline.accuracy_at(level):.3f}"
                except KeyError:
                    base_text = "n/a"
            for family, label, members in groups:
                method_curves = [c for r in members if (c := _curve(curves, r.run_id, kind))]
                best, worst = _best_worst_cells(method_curves, level)
                width = "-"
                if method_curves and members[0].method in ENVELOPE_METHODS:
                    width = f"{envelope(method_curves).width(identity_level(kind, crop_side)):.3f}"
                table.add_row(family, kind, f"{level:g}", base_text, label, best, worst, width)

    console = Console(record=True, width=200, file=io.StringIO(), color_system=None)
    console.print(table)
    return console.export_text()


def matrix_frame(
    runs: Sequence[RunInfo],
    curves: Dict[str, List[RobustnessCurve]],
    kinds: Sequence[str],
    crop_side: int,
    resize_side: int,
) -> pd.DataFrame:
    """Accuracy of every run at every test distortion's practical level."""
    rows = []
    for run in runs:
        row = {"run_id": run.run_id, "method": run.method, "train_distortion": run.train_distortion}
        for kind in kinds:
            curve = _curve(curves, run.run_id, kind)
            level = practical_level(kind, crop_side, resize_side)
            try:
                row[kind] = curve.accuracy_at(level) if curve is not None else float("nan")
            except KeyError:
                row[kind] = float("nan")
        rows.append(row)
    return pd.DataFrame(rows, columns=["run_id", "method", "train_distortion", *kinds])


def _write(path: Path, text: str, failures: Dict[str, str]) -> Optional[Path]:
    try:
        path.write_text(text, encoding="utf-8")
        return path
    except OSError as e:
        logger.error(f"Failed to write {path}: {type(e).__name__} - {e}")
        failures[path.name] = f"{type(e).__name__} - {e}"
        return None


def write_report(experiment: Experiment, cfg: ReportConfig, crop_side: int, resize_side: int) -> List[Path]:
    """
    Emit report/curves.csv, report/matrix.csv, one SVG per train->test pair
    and report/summary.txt.

    Returns:
        Paths written
    """
    runs, curves = collect(experiment)
    out = experiment.report_dir
    out.mkdir(parents=True, exist_ok=True)
    kinds = [k for k in KINDS if any(c.test_distortion == k for cs in curves.values() for c in cs)]
    failures: Dict[str, str] = {}
    written: List[Path] = []

    frame = curves_frame(runs, curves)
    written.append(_write(out / "curves.csv", frame.to_csv(index=False, float_format="%.10g", lineterminator="\n"), failures))
    matrix = matrix_frame(runs, curves, kinds, crop_side, resize_side)
    written.append(_write(out / "matrix.csv", matrix.to_csv(index=False, float_format="%.6f", lineterminator="\n"), failures))

    _configure_matplotlib()
    families = sorted({r.family for r in runs if r.method != "baseline"}) or ["none"]
    for family in families:
        for kind in kinds:
            fig = render_figure(
                family, kind, runs, curves, practical_level(kind, crop_side, resize_side), kind in cfg.log_x
            )
            if fig is not None:
                written.append(_save_figure(out / f"{family}_to_{kind}.svg", fig, failures))

    written.append(_write(out / "summary.txt", summary_table(runs, curves, kinds, cfg, crop_side, resize_side), failures))
    if failures:
        raise DataError(f"report files failed: {', '.join(f'{k} ({v})' for k, v in sorted(failures.items()))}")
    logger.info(f"Report written to {out} ({len(written)} files, {len(frame)} curve rows)")
    return [p for p in written if p is not None]
