"""Few-shot transfer evaluation: sample-size grid, reference models, and
percent-of-reference reporting.

For each task, a reference model trains on all labeled data for 200 epochs;
its test metrics define 100% performance. The grid then trains, per sample
size and per seed, one model from scratch and one initialized from the
pretrained base, both under the 50-epoch budget, and reports every cell's
test metrics as percentual loss relative to the reference. Cells are seeded
from (master seed, cell coordinates), so execution order and parallelism
cannot change any result. A failing cell is recorded as failed and the rest
of the grid continues.
"""
from __future__ import annotations

import csv
import dataclasses
import traceback
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import stable_seed
from .finetune import FinetuneConfig, FinetuneLogRow, finetune, predict
from .graphs import WindowGraph
from .metrics import METRIC_NAMES, MetricsReport, average_curves, compute_metrics, percent_loss
from .model import Checkpoint, ModelConfig

STRATEGIES = ("scratch", "pretrained")
RESULTS_FORMAT_VERSION = 1


@dataclass
class TaskData:
    train_windows: List[WindowGraph]
    test_windows: List[WindowGraph]
    n_classes: Optional[int] = None   # defaults to the largest label + 1


@dataclass
class FewShotCell:
    task: str
    sample_size: int
    strategy: str
    seed_index: int
    metrics: Optional[MetricsReport] = None
    log: List[FinetuneLogRow] = field(default_factory=list)
    failed: bool = False
    error: Optional[str] = None


@dataclass
class FewShotResult:
    tasks: List[str]
    sample_sizes: List[int]
    n_seeds: int
    epochs: int
    reference_epochs: int
    cells: List[FewShotCell] = field(default_factory=list)
    references: Dict[str, MetricsReport] = field(default_factory=dict)
    reference_logs: Dict[str, List[FinetuneLogRow]] = field(default_factory=dict)

    def cell_group(self, task: str, size: int, strategy: str) -> List[FewShotCell]:
        return [c for c in self.cells
                if c.task == task and c.sample_size == size and c.strategy == strategy]

    def mean_metric(self, task: str, size: int, strategy: str, metric: str) -> float:
        vals = [c.metrics.metric(metric) for c in self.cell_group(task, size, strategy)
                if not c.failed and c.metrics is not None]
        if not vals:
            raise ValueError(f"no successful cells for ({task}, {size}, {strategy})")
        return float(np.mean(vals))

    def percent_loss_rows(self) -> List[dict]:
        """One row per (metric, strategy, sample_size) with a column per task."""
        rows = []
        for metric in METRIC_NAMES:
            for strategy in STRATEGIES:
                for size in self.sample_sizes:
                    row = {"metric": metric, "strategy": strategy, "sample_size": size}
                    for task in self.tasks:
                        ref = self.references[task].metric(metric)
                        row[task] = percent_loss(self.mean_metric(task, size, strategy, metric), ref)
                    rows.append(row)
        return rows

    def average_gap(self) -> float:
        """Mean over tasks, metrics, and sizes of (scratch percent loss -
        pretrained percent loss); positive favors pretraining."""
        gaps = []
        for metric in METRIC_NAMES:
            for task in self.tasks:
                ref = self.references[task].metric(metric)
                for size in self.sample_sizes:
                    pl_s = percent_loss(self.mean_metric(task, size, "scratch", metric), ref)
                    pl_p = percent_loss(self.mean_metric(task, size, "pretrained", metric), ref)
                    gaps.append(pl_s - pl_p)
        return float(np.mean(gaps))

    def averaged_curves(self, split: str = "train") -> Dict[Tuple[str, str], List[float]]:
        """Normalized loss curves averaged per (task, strategy)."""
        attr = "train_loss" if split == "train" else "val_loss"
        out = {}
        for task in self.tasks:
            for strategy in STRATEGIES:
                curves = [[getattr(r, attr) for r in c.log]
                          for c in self.cells
                          if c.task == task and c.strategy == strategy and not c.failed]
                out[(task, strategy)] = average_curves(curves)
        return out

    def to_json_dict(self) -> dict:
        return {
            "format_version": RESULTS_FORMAT_VERSION,
            "tasks": self.tasks,
            "sample_sizes": self.sample_sizes,
            "n_seeds": self.n_seeds,
            "epochs": self.epochs,
            "reference_epochs": self.reference_epochs,
            "cells": [{
                "task": c.task, "sample_size": c.sample_size, "strategy": c.strategy,
                "seed_index": c.seed_index, "failed": c.failed, "error": c.error,
                "metrics": c.metrics.to_json_dict() if c.metrics else None,
                "log": [dataclasses.asdict(r) for r in c.log],
            } for c in self.cells],
            "references": {t: m.to_json_dict() for t, m in self.references.items()},
            "reference_logs": {t: [dataclasses.asdict(r) for r in rows]
                               for t, rows in self.reference_logs.items()},
            "average_gap": self.average_gap() if self._complete() else None,
            "percent_loss": self.percent_loss_rows() if self._complete() else None,
        }

    def _complete(self) -> bool:
        try:
            for metric in METRIC_NAMES:
                for task in self.tasks:
                    for size in self.sample_sizes:
                        for strategy in STRATEGIES:
                            self.mean_metric(task, size, strategy, metric)
            return bool(self.references)
        except (ValueError, KeyError):
            return False


def evaluate_on_test(ckpt: Checkpoint, test_windows: Sequence[WindowGraph],
                     n_classes: int) -> MetricsReport:
    pred, _ = predict(ckpt, test_windows)
    truth = np.concatenate([s.flow_labels for w in test_windows for s in w.snapshots
                            if s.n_flows])
    return compute_metrics(truth, pred, n_classes)


def train_reference(task: TaskData, model_cfg: ModelConfig, seed: int,
                    epochs: int = 200, lr: float = 1e-3,
                    ) -> Tuple[Checkpoint, MetricsReport, List[FinetuneLogRow]]:
    """All available labeled data, long budget, same selection rule as any
    fine-tuning run; the resulting test metrics anchor percent-loss."""
    cfg = FinetuneConfig(epochs=epochs, n_train_samples=None, seed=seed, lr=lr)
    ckpt, log = finetune(task.train_windows, model_cfg, cfg, init_from=None)
    report = evaluate_on_test(ckpt, task.test_windows, ckpt.cfg.n_classes)
    return ckpt, report, log


def run_fewshot(tasks: Dict[str, TaskData], sample_sizes: Sequence[int], n_seeds: int,
                base: Checkpoint, model_cfg: ModelConfig, master_seed: int = 0,
                epochs: int = 50, reference_epochs: int = 200, lr: float = 1e-3,
                ) -> FewShotResult:
    """Full factorial (task x sample size x strategy x seed) under the
    epoch budget, plus one reference model per task."""
    if not tasks:
        raise ValueError("run_fewshot: no tasks")
    if n_seeds < 1:
        raise ValueError(f"run_fewshot: n_seeds must be >= 1, got {n_seeds}")
    result = FewShotResult(tasks=sorted(tasks), sample_sizes=sorted(sample_sizes),
                           n_seeds=n_seeds, epochs=epochs, reference_epochs=reference_epochs)

    for task_name in result.tasks:
        task = tasks[task_name]
        task_cfg = dataclasses.replace(model_cfg, n_classes=task.n_classes,
                                       with_decoder=False)
        _, ref_report, ref_log = train_reference(
            task, task_cfg, seed=stable_seed(master_seed, "reference", task_name),
            epochs=reference_epochs, lr=lr)
        result.references[task_name] = ref_report
        result.reference_logs[task_name] = ref_log

        for size in result.sample_sizes:
            for strategy in STRATEGIES:
                for seed_index in range(n_seeds):
                    cell = FewShotCell(task=task_name, sample_size=size,
                                       strategy=strategy, seed_index=seed_index)
                    # the seed deliberately excludes the strategy: the scratch and
                    # pretrained arms of one (size, seed) pair share the window
                    # split, the sampled flows, and the head init, so they differ
                    # in encoder initialization only
                    cfg = FinetuneConfig(
                        epochs=epochs, n_train_samples=size, lr=lr,
                        seed=stable_seed(master_seed, "cell", task_name, size,
                                         seed_index))
                    try:
                        ckpt, log = finetune(task.train_windows, task_cfg, cfg,
                                             init_from=base if strategy == "pretrained" else None)
                        cell.log = log
                        cell.metrics = evaluate_on_test(ckpt, task.test_windows,
                                                        ckpt.cfg.n_classes)
                    except Exception as exc:   # keep the rest of the grid running
                        cell.failed = True
                        cell.error = f"{type(exc).__name__}: {exc}"
                        cell.log = cell.log or []
                        traceback.print_exc()
                    result.cells.append(cell)
    return result


def write_table_csv(path, result: FewShotResult) -> None:
    """Percent-loss grid: metric/strategy/sample_size rows, task columns."""
    rows = result.percent_loss_rows()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "strategy", "sample_size"] + result.tasks)
        for row in rows:
            writer.writerow([row["metric"], row["strategy"], row["sample_size"]]
                            + [repr(row[t]) for t in result.tasks])


def write_curves_csv(path, result: FewShotResult) -> None:
    """Averaged normalized loss curves, one column per (task, strategy, split)."""
    groups = {}
    for split in ("train", "val"):
        for key, curve in result.averaged_curves(split).items():
            groups[(key[0], key[1], split)] = curve
    keys = sorted(groups)
    length = max((len(c) for c in groups.values()), default=0)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch"] + ["|".join(k) for k in keys])
        for e in range(length):
            writer.writerow([e] + [repr(groups[k][e]) if e < len(groups[k]) else ""
                                   for k in keys])
