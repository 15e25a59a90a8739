"""Incremental experiment loop: train, add new prototypes, compensate old ones, evaluate.

Methods that share a training regime (everything except ``finetune`` trains with
distillation) can be run as *tracks* over one sequence of trained networks, which
is how comparisons on identical checkpoints are made.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, BackwardLedger
from .config import HEAD_METHODS, ExperimentConfig, config_snapshot
from .data import LabeledDataset, TaskStream, load_image_dataset, make_synthetic_stream, split_tasks
from .drift import (
    DriftEstimate,
    ExemplarStore,
    adc_compensate,
    drift_quality,
    nme_prototypes,
    oracle_drift,
    sdc_compensate,
    select_exemplars,
)
from .errors import AdcLabError, ConfigError
from .evaluation import (
    DriftRow,
    RunReport,
    emit_report,
    evaluate_after_task,
    evaluate_head,
    write_summary,
)
from .net import Network, convnet, mlp
from .proto import PrototypeStore, compute_prototypes, mean_embedding
from .train import EpochLog, TrainConfig, train_task, write_train_log

log = logging.getLogger(__name__)

SWEEP_AXES = ("alpha", "iterations", "m")


def _subseed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    d = cfg.data
    if d.kind == "synthetic":
        if d.n_classes % cfg.T:
            raise ConfigError(f"{d.n_classes} classes cannot be split into {cfg.T} tasks")
        data_seed = seed if d.seed is None else d.seed
        return make_synthetic_stream(d.n_classes, d.n_classes // cfg.T, d.dim, d.samples_per_class,
                                     d.cluster_spread, data_seed, d.separation,
                                     d.test_samples_per_class, class_order_seed=seed)
    train = load_image_dataset(d.path, d.format, d.labels_path)
    if d.test_path:
        test = load_image_dataset(d.test_path, d.format, d.test_labels_path)
    else:
        rng = np.random.default_rng(_subseed(seed, 11))
        hold = np.zeros(len(train), dtype=bool)
        for k in train.class_ids:
            idx = np.flatnonzero(train.labels == k)
            n = max(1, int(round(d.test_fraction * len(idx))))
            hold[rng.choice(idx, size=n, replace=False)] = True
        train, test = train.subset(np.flatnonzero(~hold)), train.subset(np.flatnonzero(hold))
    return split_tasks(train, cfg.T, seed, test)


def build_network(cfg: ExperimentConfig, stream: TaskStream, seed: int) -> Network:
    first = stream.tasks[0]
    arch = cfg.net.arch
    if arch == "auto":
        arch = "conv" if first.image_shape is not None else "mlp"
    init_seed = _subseed(seed, 7)
    if arch == "mlp":
        return mlp(first.dim, cfg.net.hidden, cfg.net.feature_dim or 32, seed=init_seed)
    if arch == "conv":
        if first.image_shape is None:
            raise ConfigError("conv network needs image-shaped data")
        return convnet(first.image_shape, cfg.net.conv_channels, cfg.net.kernel, cfg.net.stride,
                       cfg.net.feature_dim or 64, seed=init_seed)
    raise ConfigError(f"unknown architecture {arch!r}")


def resolve_alpha(cfg: ExperimentConfig, stream: TaskStream) -> float:
    if cfg.alpha is not None:
        return cfg.alpha
    lo, hi = stream.pixel_range
    if cfg.data.kind == "synthetic":
        return 0.1 * (hi - lo)
    return 25.0 / 255.0 * (hi - lo)


def attack_config(cfg: ExperimentConfig, stream: TaskStream) -> AttackConfig:
    return AttackConfig(resolve_alpha(cfg, stream), cfg.iterations, cfg.m, stream.pixel_range)


def train_config_for(method: str, train: TrainConfig) -> TrainConfig:
    return replace(train, lam=0.0) if method == "finetune" else train


@dataclass
class Track:
    """Prototype/evaluation state of one method riding on a shared training run."""

    method: str
    exemplars: int | None = None  # per class; 0 keeps everything
    label: str = ""
    store: PrototypeStore | None = None
    memory: ExemplarStore | None = None
    ledger: BackwardLedger = field(default_factory=BackwardLedger)
    accuracy: list[float] = field(default_factory=list)
    oracle_accuracy: list[float] = field(default_factory=list)
    drift_rows: list[DriftRow] = field(default_factory=list)

    def __post_init__(self):
        if not self.label:
            if self.method == "nme":
                self.label = f"nme{self.exemplars if self.exemplars else 'all'}"
            else:
                self.label = self.method


class _OracleVault:
    """Evaluation-only copy of old training data; never handed to a method."""

    def __init__(self):
        self.per_class: dict[int, np.ndarray] = {}

    def keep(self, task: LabeledDataset) -> None:
        for k, x in task.by_class().items():
            self.per_class[k] = np.array(x, copy=True)

    def prototypes(self, net: Network, into: PrototypeStore, task: int) -> PrototypeStore:
        out = into.copy()
        for k in sorted(self.per_class):
            out.set(k, mean_embedding(net, self.per_class[k]), task)
        return out


def _estimate_from_stores(method, before: PrototypeStore, after: PrototypeStore, classes) -> DriftEstimate:
    est = DriftEstimate(method)
    for k in classes:
        est.add(k, after[k] - before[k], 0)
    return est


def run_tracks(cfg: ExperimentConfig, seed: int, tracks: Sequence[Track],
               stream: TaskStream | None = None, history: list[EpochLog] | None = None,
               checkpoints: list[Network] | None = None) -> list[RunReport]:
    """One training run, many prototype methods. All tracks must share a training regime.

    Only ``stream.tasks[t]`` of the current task is read inside the loop; old task data
    reaches nothing but the oracle vault, which exists only when ``cfg.oracle_eval``.
    """
    regimes = {t.method == "finetune" for t in tracks}
    if len(regimes) != 1:
        raise ConfigError("finetune cannot share a training run with distillation methods")
    method0 = tracks[0].method
    stream = stream if stream is not None else build_stream(cfg, seed)
    T = len(stream.tasks)
    init = build_network(cfg, stream, seed)
    tcfg = train_config_for(method0, cfg.train)
    acfg = attack_config(cfg, stream)
    vault = _OracleVault() if cfg.oracle_eval else None
    net_prev: Network | None = None
    seen_classes: list[int] = []
    n_classes: list[int] = []
    for t in range(T):
        task = stream.tasks[t]
        test_seen = stream.test_tasks[:t + 1]
        net = train_task(net_prev, task, tcfg, _subseed(seed, 3, t), init=init, task_index=t,
                         history=history)
        if checkpoints is not None:
            checkpoints.append(net)
        new_store = compute_prototypes(net, task, task=t)
        old_classes = list(seen_classes)
        truth = None
        oracle_store = None
        if vault is not None:
            oracle_store = vault.prototypes(net, new_store, t)
            if t > 0:
                truth = oracle_drift(net_prev, net, vault.per_class)
        for tr in tracks:
            tr.ledger.task = t
            if tr.method in HEAD_METHODS:
                tr.accuracy.append(evaluate_head(net, test_seen))
                if oracle_store is not None:
                    tr.oracle_accuracy.append(evaluate_after_task(net, oracle_store, test_seen))
                continue
            est = None
            if t == 0 or tr.method == "ncm":
                store = tr.store.copy() if tr.store is not None else PrototypeStore(net.feature_dim)
                if t > 0:
                    est = _estimate_from_stores("ncm", tr.store, tr.store, old_classes)
            elif tr.method == "adc":
                store, est = adc_compensate(net_prev, net, tr.store, task, acfg, tr.ledger,
                                            old_classes, task=t)
            elif tr.method == "sdc":
                store, est = sdc_compensate(net_prev, net, tr.store, task, cfg.sdc_sigma,
                                            old_classes, task=t)
            elif tr.method == "nme":
                store = nme_prototypes(net, tr.memory, task=t)
                est = _estimate_from_stores("nme", tr.store, store, old_classes)
            else:
                raise ConfigError(f"unknown method {tr.method!r}")
            tr.store = store.merge(new_store)
            if tr.method == "nme":
                E = tr.exemplars or len(task)  # 0 keeps whole classes
                if tr.memory is None:
                    tr.memory = ExemplarStore(E)
                tr.memory.per_class = max(tr.memory.per_class, E)
                tr.memory.update(select_exemplars(task, E, cfg.exemplar_policy, net,
                                                  _subseed(seed, 5, t)))
            if truth is not None and est is not None:
                q = drift_quality(est, truth)
                for k in truth.classes:
                    tr.drift_rows.append(DriftRow(t, k, tr.method, est.n_contributing[k], q[k],
                                                  float(np.linalg.norm(est.deltas[k]))))
            tr.accuracy.append(evaluate_after_task(net, tr.store, test_seen))
            if oracle_store is not None:
                tr.oracle_accuracy.append(evaluate_after_task(net, oracle_store, test_seen))
        if vault is not None:
            vault.keep(task)
        seen_classes += task.class_ids
        n_classes.append(len(seen_classes))
        net_prev = net

    snapshot = config_snapshot(cfg)
    reports = []
    for tr in tracks:
        reports.append(RunReport(tr.label, cfg.data.name, T, seed, list(tr.accuracy),
                                 list(tr.drift_rows), tr.ledger.total, list(n_classes), snapshot,
                                 list(tr.oracle_accuracy), tr.ledger))
    return reports


def run_seed(cfg: ExperimentConfig, seed: int, stream: TaskStream | None = None,
             history: list[EpochLog] | None = None) -> RunReport:
    (report,) = run_tracks(cfg, seed, [Track(cfg.method, cfg.exemplars)], stream, history)
    report.method = cfg.method
    return report


def _run_one(args) -> tuple[int, RunReport | None, str | None]:
    cfg, seed = args
    history: list[EpochLog] = []
    try:
        report = run_seed(cfg, seed, history=history)
    except (AdcLabError, ArithmeticError) as exc:
        log.error("seed %d failed: %s", seed, exc)
        return seed, None, f"{type(exc).__name__}: {exc}"
    if cfg.out_dir:
        run_dir = Path(cfg.out_dir) / f"{cfg.method}_seed{seed}"
        emit_report(report, run_dir)
        write_train_log(history, run_dir / "train_log.csv")
    return seed, report, None


def run_experiment(cfg: ExperimentConfig) -> list[RunReport]:
    """One report per seed; failing seeds are recorded in errors.csv and skipped."""
    jobs = [(cfg, s) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    reports = [r for _, r, _ in results if r is not None]
    errors = [(s, e) for s, _, e in results if e is not None]
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_summary(reports, out / f"summary_{cfg.method}.csv")
        with open(out / f"errors_{cfg.method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "seed", "error"])
            w.writerows([cfg.method, s, e] for s, e in errors)
    return reports


@dataclass
class SweepRow:
    value: float
    n_runs: int
    a_last: float
    a_inc: float
    backward_passes: float


SWEEP_FIELDS = ["axis", "value", "n_runs", "a_last", "a_inc", "backward_passes"]


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence[float]) -> list[SweepRow]:
    """Re-run the experiment once per value of ``axis`` and average over seeds."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"cannot sweep {axis!r}; choose from {SWEEP_AXES}")
    if cfg.method != "adc":
        raise ConfigError(f"axis {axis!r} only applies to method adc, not {cfg.method!r}")
    rows = []
    for v in values:
        v = int(v) if axis in ("iterations", "m") else float(v)
        sub = cfg.replace(**{axis: v})
        if cfg.out_dir:
            sub = sub.replace(out_dir=str(Path(cfg.out_dir) / f"{axis}_{v}"))
        reports = run_experiment(sub)
        n = len(reports)
        rows.append(SweepRow(v, n,
                             math.fsum(r.a_last for r in reports) / n if n else float("nan"),
                             math.fsum(r.a_inc for r in reports) / n if n else float("nan"),
                             math.fsum(r.backward_passes for r in reports) / n if n else float("nan")))
    if cfg.out_dir:
        write_sweep(rows, axis, Path(cfg.out_dir) / f"sweep_{axis}.csv")
    return rows


def write_sweep(rows: Sequence[SweepRow], axis: str, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([axis, repr(r.value), r.n_runs, repr(r.a_last), repr(r.a_inc),
                        repr(r.backward_passes)])
