"""
Desk-scale trend checks on the shipped configs.

Each test trains full grids on CPU and takes a long time, so they are
marked slow and deselected by default. Run them with:

    pytest -m slow test_trends.py
"""

from pathlib import Path
from typing import Dict, List, Optional

import pytest
from typer.testing import CliRunner

from app.config import DEFAULT_CONFIG, load_config
from app.distortions import identity_level, practical_level
from app.harness import Experiment, RobustnessCurve, envelope, select_best_worst
from app.main import app
from app.report import collect

ROTATION_CONFIG = Path(__file__).parent / "config" / "rotation_sym.yaml"

runner = CliRunner()

pytestmark = pytest.mark.slow


def _train_and_evaluate(config: Path, out: Path, seed: Optional[int] = None) -> Dict[str, List[RobustnessCurve]]:
    """train-baseline, run and evaluate; returns the curves of every run keyed by method."""
    flags = ["--config", str(config), "--out", str(out)]
    if seed is not None:
        flags += ["--seed", str(seed)]
    for command in (["train-baseline"], ["run"], ["evaluate"]):
        result = runner.invoke(app, [*command, *flags])
        assert result.exit_code == 0, f"{command}: {result.output}"
    runs, curves = collect(Experiment(out))
    by_method: Dict[str, List[RobustnessCurve]] = {}
    for run in runs:
        by_method.setdefault(run.method, []).extend(curves[run.run_id])
    return by_method


def _on(curves: List[RobustnessCurve], kind: str) -> List[RobustnessCurve]:
    return [c for c in curves if c.test_distortion == kind]


def _best_accuracy(curves: List[RobustnessCurve], level: float) -> float:
    best, _ = select_best_worst(curves, level)
    return next(c for c in curves if c.run_id == best).accuracy_at(level)


def test_stability_beats_augmentation_on_gaussian(tmp_path):
    """ST improves on the baseline at the practical sigma, keeps a tighter envelope than DA and does not forget."""
    cfg = load_config(DEFAULT_CONFIG)
    crop, resize = cfg.pipeline.crop_side, cfg.pipeline.resize_side
    by_method = _train_and_evaluate(DEFAULT_CONFIG, tmp_path / "gaussian")
    baseline = _on(by_method["baseline"], "gaussian")[0]
    stability = _on(by_method["stability"], "gaussian")
    augment = _on(by_method["augment"], "gaussian")
    practical = practical_level("gaussian", crop, resize)
    clean = identity_level("gaussian", crop)

    assert _best_accuracy(stability, practical) >= baseline.accuracy_at(practical) + 0.05

    da_best, da_worst = select_best_worst(augment, clean)
    spread = {c.run_id: c.accuracy_at(clean) for c in augment}
    assert envelope(stability).width(clean) < spread[da_best] - spread[da_worst]

    base_clean = baseline.accuracy_at(clean)
    assert any(base_clean - c.accuracy_at(clean) >= 0.05 for c in augment if "-p1" in c.run_id)
    assert all(base_clean - c.accuracy_at(clean) < 0.02 for c in stability)


def test_symmetric_stability_wins_under_rotation(tmp_path):
    """Over three seeds the best ST-sym model matches or beats the best ST model at the practical rotation."""
    cfg = load_config(ROTATION_CONFIG)
    practical = practical_level("rotation", cfg.pipeline.crop_side, cfg.pipeline.resize_side)
    wins = 0
    for seed in (0, 1, 2):
        by_method = _train_and_evaluate(ROTATION_CONFIG, tmp_path / f"seed{seed}", seed)
        symmetric = _best_accuracy(_on(by_method["stability_sym"], "rotation"), practical)
        asymmetric = _best_accuracy(_on(by_method["stability"], "rotation"), practical)
        wins += symmetric >= asymmetric
    assert wins >= 2
