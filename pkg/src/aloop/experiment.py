"""Cross-validated AL experiments on synthetic workspaces.

run_experiment drives one full controller cycle per (strategy, fold, seed)
cell with the oracle playing the annotator, evaluates held-out dice at every
budget step, and aggregates everything into a learning curve. Cells are
independent; they run in parallel when workers > 1, and a failed cell is
recorded and skipped rather than killing the run.
"""

from __future__ import annotations

import shutil
import tempfile
import traceback
import warnings as _warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from . import segbackend, strategies
from .config import RunConfig
from .controller import CycleController
from .datamgr import DataManager, UsageError
from .simlab import (
    SyntheticSpec,
    generate_synthetic,
    ground_truth_items,
    kfold_volumes,
    oracle_annotate,
)
from .util import stable_seed

CSV_COLUMNS = ["budget_pct", "strategy", "fold", "seed", "class", "dice"]


@dataclass
class CurveRow:
    budget_pct: float
    strategy: str
    fold: int
    seed: int
    class_index: int
    dice: float


@dataclass
class LearningCurve:
    rows: List[CurveRow] = field(default_factory=list)
    failures: List[dict] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.budget_pct, r.strategy, r.fold, r.seed, r.class_index, r.dice)
             for r in self.rows],
            columns=CSV_COLUMNS,
        )

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @staticmethod
    def read_csv(path: Union[str, Path]) -> "LearningCurve":
        frame = pd.read_csv(path, float_precision="round_trip")
        rows = [CurveRow(float(r.budget_pct), str(r.strategy), int(r.fold),
                         int(r.seed), int(r["class"]), float(r.dice))
                for _, r in frame.iterrows()]
        return LearningCurve(rows=rows)

    def budget_steps(self, strategy: str) -> List[float]:
        steps = sorted({r.budget_pct for r in self.rows if r.strategy == strategy})
        return steps

    def mean_dice_at(self, strategy: str, budget_pct: float, tol: float = 1e-6) -> float:
        """Mean over classes, folds and seeds at one budget step."""
        vals = [r.dice for r in self.rows
                if r.strategy == strategy and abs(r.budget_pct - budget_pct) < tol]
        if not vals:
            raise UsageError(f"no rows for {strategy} at {budget_pct}%")
        return float(np.mean(vals))


def _cell_workspace(base: Path, cell_dir: Path, test_volumes: Sequence[str]) -> Path:
    """Private workspace copy for one cell: images + layers, fold split file."""
    cell_dir.mkdir(parents=True, exist_ok=True)
    if not (cell_dir / "volumes").exists():
        shutil.copytree(base / "volumes", cell_dir / "volumes")
    shutil.copy(base / "layers.json", cell_dir / "layers.json")
    dm = DataManager(cell_dir)
    test = set(test_volumes)
    assignment = {"train": [], "validation": [], "test": []}
    for sid, sample in dm.samples.items():
        assignment["test" if sample.volume_id in test else "train"].append(sid)
    dm.write_splits(assignment)
    return cell_dir


def _run_cell(args: dict) -> dict:
    """One (strategy, fold, seed) cell; returns plain dicts for cross-process use."""
    import torch

    torch.set_num_threads(1)
    cfg: RunConfig = args["cfg"]
    base = Path(args["base"])
    strategy = args["strategy"]
    fold = args["fold"]
    seed = args["seed"]
    try:
        cfg.active_learning.strategy = strategy
        cfg.active_learning.rng_seed = stable_seed("cell", strategy, fold, seed)
        cell_dir = _cell_workspace(base, Path(args["cell_dir"]), args["test_volumes"])
        ctrl = CycleController(cfg, cell_dir, auto_advance=False)
        test_ids = sorted(set(ctrl.dm.samples) - ctrl.train_split)
        test_items = ground_truth_items(base, test_ids)
        pool_size = ctrl.initial_pool

        rows: List[tuple] = []

        def record(model, budget_pct: float) -> None:
            per_class = segbackend.evaluate_dice(model, test_items)
            for c, dice in sorted(per_class.items()):
                rows.append((round(budget_pct, 6), strategy, fold, seed, c, float(dice)))

        report = ctrl.trigger_al_iteration()  # seed dispatch
        while True:
            queried = ctrl.state.active_query.sample_ids
            records = [oracle_annotate(sid, base) for sid in queried]
            accepted, rejected = ctrl.dm.update_annotations(records)
            assert not rejected, f"oracle records rejected: {rejected}"
            report = ctrl.trigger_al_iteration()
            if report.trained:
                record(ctrl.model, 100.0 * report.annotated_count / pool_size)
            if report.stop_reason:
                break

        if args["include_full"]:
            rest = sorted(ctrl.dm.pool.unannotated & ctrl.train_split)
            ctrl.dm.update_annotations([oracle_annotate(sid, base) for sid in rest])
            items = ctrl.dm.training_items(sorted(ctrl.train_split))
            full = segbackend.train(
                cfg, items, n_classes=ctrl.dm.class_count,
                rng_seed=stable_seed(cfg.active_learning.rng_seed, "full"))
            record(full, 100.0)

        if args["cleanup"]:
            shutil.rmtree(args["cell_dir"], ignore_errors=True)
        return {"rows": rows}
    except Exception:
        return {"failure": {"strategy": strategy, "fold": fold, "seed": seed,
                            "error": traceback.format_exc()}}


def run_experiment(
    cfg: RunConfig,
    spec: SyntheticSpec,
    strategy_names: Sequence[str],
    folds: int = 5,
    seeds: Sequence[int] = (0, 1, 2),
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    include_full: bool = True,
) -> LearningCurve:
    """k-fold cross-validated learning curves over the given strategies.

    Deterministic: two invocations with identical inputs produce identical
    curves regardless of worker count.
    """
    unknown = [s for s in strategy_names if s not in strategies.strategy_names()]
    if unknown:
        raise UsageError(f"unregistered strategies: {unknown}")
    if folds < 2:
        raise UsageError("need at least 2 folds")

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="aloop-exp-")
        out_dir = tmp.name
    out_dir = Path(out_dir)
    base = out_dir / "base"
    generate_synthetic(spec, base)
    volume_ids = [f"vol_{v:03d}" for v in range(spec.volumes)]
    fold_sets = kfold_volumes(volume_ids, folds, rng_seed=spec.rng_seed)

    cells = []
    for strategy in strategy_names:
        for fold, test_volumes in enumerate(fold_sets):
            for seed in seeds:
                cells.append({
                    "cfg": cfg,
                    "base": str(base),
                    "cell_dir": str(out_dir / "cells" / f"{strategy}_f{fold}_s{seed}"),
                    "strategy": strategy,
                    "fold": fold,
                    "seed": int(seed),
                    "test_volumes": list(test_volumes),
                    "include_full": include_full,
                    "cleanup": tmp is not None,  # pointless to keep cells of a temp run
                })

    results = []
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    curve = LearningCurve()
    for outcome in results:
        if "failure" in outcome:
            curve.failures.append(outcome["failure"])
            _warnings.warn(
                "cell failed: {strategy} fold {fold} seed {seed}".format(**outcome["failure"]),
                stacklevel=2)
            continue
        curve.rows.extend(CurveRow(*row) for row in outcome["rows"])
    curve.rows.sort(key=lambda r: (r.strategy, r.budget_pct, r.fold, r.seed, r.class_index))
    if tmp is not None:
        tmp.cleanup()
    return curve


def render_table(curve: LearningCurve) -> str:
    """Budget-by-strategy table of mean +- std dice (over folds, seeds, classes)."""
    if not curve.rows:
        return "(no rows)"
    frame = curve.to_frame()
    # mean over classes first, so each (fold, seed) cell contributes once
    per_cell = frame.groupby(["strategy", "budget_pct", "fold", "seed"])["dice"].mean()
    stats = per_cell.groupby(["strategy", "budget_pct"]).agg(["mean", "std"])
    budgets = sorted(frame["budget_pct"].unique())
    names = sorted(frame["strategy"].unique())
    width = max(len(s) for s in names) + 2
    header = "GT%".ljust(8) + "".join(s.rjust(max(width, 14)) for s in names)
    lines = [header, "-" * len(header)]
    for b in budgets:
        cells = []
        for s in names:
            try:
                mean = stats.loc[(s, b), "mean"]
                std = stats.loc[(s, b), "std"]
                std = 0.0 if pd.isna(std) else std
                cells.append(f"{mean:.3f}+-{std:.3f}".rjust(max(width, 14)))
            except KeyError:
                cells.append("-".rjust(max(width, 14)))
        lines.append(f"{b:6.1f}  " + "".join(cells))
    if curve.failures:
        lines.append(f"({len(curve.failures)} failed cells)")
    return "\n".join(lines)
