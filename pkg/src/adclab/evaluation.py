"""Run-level metrics, drift-estimation overhead and CSV reports.

CSV schemas (one directory per method/seed run):

run.csv      method, dataset, T, seed, task, n_classes, accuracy
drift.csv    task, class, method, n_contributing, cos_to_oracle, delta_norm
summary.csv  method, dataset, T, seed, a_last, a_inc, backward_passes
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import BackwardLedger
from .data import LabeledDataset, concat
from .errors import EvaluationError
from .net import Network
from .proto import PrototypeStore, ncm_predict

RUN_FIELDS = ["method", "dataset", "T", "seed", "task", "n_classes", "accuracy"]
DRIFT_FIELDS = ["task", "class", "method", "n_contributing", "cos_to_oracle", "delta_norm"]
SUMMARY_FIELDS = ["method", "dataset", "T", "seed", "a_last", "a_inc", "backward_passes"]


@dataclass
class DriftRow:
    task: int
    cls: int
    method: str
    n_contributing: int
    cos_to_oracle: float
    delta_norm: float


@dataclass
class RunReport:
    method: str
    dataset: str
    T: int
    seed: int
    per_task_accuracy: list[float] = field(default_factory=list)
    drift_rows: list[DriftRow] = field(default_factory=list)
    backward_passes: int = 0
    per_task_classes: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    oracle_accuracy: list[float] = field(default_factory=list)
    ledger: BackwardLedger | None = None

    @property
    def a_last(self) -> float:
        return summarize(self.per_task_accuracy)[0]

    @property
    def a_inc(self) -> float:
        return summarize(self.per_task_accuracy)[1]


def summarize(per_task_accuracy: Sequence[float]) -> tuple[float, float]:
    """(accuracy after the last task, mean accuracy over all tasks incl. the first)."""
    if len(per_task_accuracy) == 0:
        raise EvaluationError("no accuracies to summarize")
    acc = [float(a) for a in per_task_accuracy]
    return acc[-1], math.fsum(acc) / len(acc)


def _pool(test_tasks: Sequence[LabeledDataset]) -> LabeledDataset:
    if not test_tasks:
        raise EvaluationError("no test tasks given")
    return concat(list(test_tasks))


def evaluate_after_task(net: Network, store: PrototypeStore,
                        test_tasks: Sequence[LabeledDataset]) -> float:
    """Task-agnostic NCM accuracy over the pooled test data of every seen task."""
    pooled = _pool(test_tasks)
    missing = set(pooled.class_ids) - set(store.classes)
    if missing:
        raise EvaluationError(f"no prototypes for classes {sorted(missing)}")
    pred = ncm_predict(net.forward_features(pooled.samples), store)
    return float(np.mean(pred == pooled.labels))


def evaluate_head(net: Network, test_tasks: Sequence[LabeledDataset]) -> float:
    """Same protocol with the softmax head's argmax instead of NCM."""
    pooled = _pool(test_tasks)
    pred = net.forward_logits(pooled.samples).argmax(axis=1)
    return float(np.mean(pred == pooled.labels))


def count_backward_passes(ledger: BackwardLedger) -> int:
    return ledger.total


def expected_backward_passes(T: int, classes_per_task: int, iterations: int) -> int:
    """Old classes x iterations, summed over every task after the first."""
    return sum(classes_per_task * t * iterations for t in range(1, T))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError("row width does not match header")
            w.writerow([_fmt(v) for v in row])


def summary_row(r: RunReport) -> list:
    return [r.method, r.dataset, r.T, r.seed, r.a_last, r.a_inc, r.backward_passes]


def emit_report(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    """Write run.csv, drift.csv and summary.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("run", "drift", "summary")}
    classes = report.per_task_classes or [0] * len(report.per_task_accuracy)
    _write(paths["run"], RUN_FIELDS,
           ([report.method, report.dataset, report.T, report.seed, t, c, a]
            for t, (c, a) in enumerate(zip(classes, report.per_task_accuracy))))
    _write(paths["drift"], DRIFT_FIELDS,
           ([d.task, d.cls, d.method, d.n_contributing, d.cos_to_oracle, d.delta_norm]
            for d in report.drift_rows))
    _write(paths["summary"], SUMMARY_FIELDS, [summary_row(report)])
    return paths


def write_summary(reports: Sequence[RunReport], path: str | Path) -> None:
    _write(Path(path), SUMMARY_FIELDS, (summary_row(r) for r in reports))


def read_report(out_dir: str | Path) -> RunReport:
    out = Path(out_dir)
    with open(out / "summary.csv", newline="") as fh:
        (s,) = list(csv.DictReader(fh))
    report = RunReport(s["method"], s["dataset"], int(s["T"]), int(s["seed"]),
                       backward_passes=int(s["backward_passes"]))
    with open(out / "run.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            report.per_task_accuracy.append(float(row["accuracy"]))
            report.per_task_classes.append(int(row["n_classes"]))
    with open(out / "drift.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            report.drift_rows.append(DriftRow(int(row["task"]), int(row["class"]), row["method"],
                                              int(row["n_contributing"]), float(row["cos_to_oracle"]),
                                              float(row["delta_norm"])))
    return report
