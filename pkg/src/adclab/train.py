"""Per-task training: cross-entropy on the new data plus logits distillation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DimensionError, DivergenceError, LabelError
from .net import SGD, CrossEntropy, Network, log_softmax, softmax

log = logging.getLogger(__name__)


def _milestones(epochs: int, fractions=(0.3, 0.6, 0.8)) -> tuple[int, ...]:
    ms = sorted({int(round(f * epochs)) for f in fractions})
    return tuple(m for m in ms if 0 < m < epochs)


@dataclass
class TrainConfig:
    epochs_first_task: int = 30
    epochs_later_tasks: int = 20
    lr_first_task: float = 0.01
    lr_later_tasks: float = 0.005
    milestones_first_task: tuple[int, ...] | None = None
    milestones_later_tasks: tuple[int, ...] | None = None
    lr_decay: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lam: float = 10.0
    temperature: float = 2.0
    batch_size: int = 32

    def __post_init__(self):
        if self.milestones_first_task is None:
            self.milestones_first_task = _milestones(self.epochs_first_task)
        if self.milestones_later_tasks is None:
            self.milestones_later_tasks = _milestones(self.epochs_later_tasks)
        self.milestones_first_task = tuple(self.milestones_first_task)
        self.milestones_later_tasks = tuple(self.milestones_later_tasks)
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.batch_size < 1 or self.lr_decay <= 0:
            raise ConfigError("batch_size must be >= 1 and lr_decay > 0")
        for ms, ep in ((self.milestones_first_task, self.epochs_first_task),
                       (self.milestones_later_tasks, self.epochs_later_tasks)):
            if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= ep or m <= 0 for m in ms):
                raise ConfigError(f"milestones {ms} must be strictly increasing and inside 1..{ep - 1}")

    def schedule(self, first: bool) -> tuple[int, float, tuple[int, ...]]:
        if first:
            return self.epochs_first_task, self.lr_first_task, self.milestones_first_task
        return self.epochs_later_tasks, self.lr_later_tasks, self.milestones_later_tasks

    def lr_at(self, epoch: int, first: bool) -> float:
        _, lr, ms = self.schedule(first)
        return lr / self.lr_decay ** sum(epoch >= m for m in ms)


def distillation_loss(student_logits, teacher_logits, temperature: float,
                      with_grad: bool = False):
    """Cross-entropy of the softened teacher distribution against the softened student.

    Averaged over the batch. With ``with_grad`` also returns d(loss)/d(student_logits).
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise DimensionError(f"student logits {s.shape} vs teacher logits {t.shape}")
    p = softmax(t / temperature)
    logq = log_softmax(s / temperature)
    n = s.shape[0]
    value = float(-(p * logq).sum() / n)
    if not with_grad:
        return value
    return value, (np.exp(logq) - p) / (temperature * n)


@dataclass
class LwFLoss:
    """CE over every seen class plus ``lam`` x distillation over the old-class logits."""

    teacher_logits: np.ndarray | None
    lam: float
    temperature: float
    ce: CrossEntropy = field(default_factory=CrossEntropy)

    def __call__(self, logits, labels):
        value, d = self.ce(logits, labels)
        if self.teacher_logits is None or self.lam == 0:
            return value, d
        n_old = self.teacher_logits.shape[1]
        kd, dkd = distillation_loss(logits[:, :n_old], self.teacher_logits, self.temperature,
                                    with_grad=True)
        d = d.copy()
        d[:, :n_old] += (self.lam * dkd).astype(d.dtype)
        return value + self.lam * kd, d


def task_loss(net: Network, teacher: Network | None, batch, labels, cfg: TrainConfig,
              first_task: bool | None = None) -> float:
    """Scalar training objective for one batch (no parameter update)."""
    if first_task is None:
        first_task = teacher is None
    if not first_task and teacher is None and cfg.lam > 0:
        raise ConfigError("teacher required for distillation after the first task")
    tl = None if first_task or cfg.lam == 0 else teacher.forward_logits(batch)
    value, _ = LwFLoss(tl, cfg.lam, cfg.temperature)(net.forward_logits(batch), np.asarray(labels))
    return value


@dataclass
class EpochLog:
    task: int
    epoch: int
    lr: float
    train_loss: float
    train_acc: float


def train_task(net_prev: Network | None, task: LabeledDataset, cfg: TrainConfig, seed: int,
               init: Network | None = None, task_index: int = 0,
               history: list[EpochLog] | None = None) -> Network:
    """Train a copy of ``net_prev`` (or of ``init`` on the first task) on one task.

    The head is extended by the task's class count before optimisation. ``net_prev``
    is left untouched and serves as the frozen teacher.
    """
    first = net_prev is None
    if first and init is None:
        raise ConfigError("first task needs an initial network")
    base = init if first else net_prev
    net = base.copy()
    rng = np.random.default_rng(seed)
    classes = task.class_ids
    n_old = net.num_classes
    if classes and (min(classes) != n_old or max(classes) != n_old + len(classes) - 1):
        raise LabelError(f"task labels {classes[0]}..{classes[-1]} do not follow the {n_old} seen classes")
    net.extend_head(len(classes), rng)
    teacher = None if first or cfg.lam == 0 else net_prev

    epochs, _, _ = cfg.schedule(first)
    opt = SGD(net, cfg.lr_at(0, first), cfg.momentum, cfg.weight_decay)
    x_all, y_all = task.samples, task.labels
    n = len(y_all)
    for epoch in range(epochs):
        opt.lr = cfg.lr_at(epoch, first)
        order = rng.permutation(n)
        tot_loss = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            tl = teacher.forward_logits(x) if teacher is not None else None
            value, grads = net.param_gradient(x, y, LwFLoss(tl, cfg.lam, cfg.temperature))
            if not np.isfinite(value):
                raise DivergenceError(epoch, b, value)
            opt.step(grads)
            tot_loss += value * len(idx)
        # accuracy with the weights at epoch end
        correct = int((net.forward_logits(x_all).argmax(axis=1) == y_all).sum())
        entry = EpochLog(task_index, epoch, opt.lr, tot_loss / max(n, 1), correct / max(n, 1))
        log.debug("task %d epoch %d lr %.4g loss %.4f acc %.3f", *vars(entry).values())
        if history is not None:
            history.append(entry)
    return net


def write_train_log(history: list[EpochLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "epoch", "lr", "train_loss", "train_acc"])
        for e in history:
            w.writerow([e.task, e.epoch, repr(e.lr), repr(e.train_loss), repr(e.train_acc)])
