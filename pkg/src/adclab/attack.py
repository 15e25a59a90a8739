"""Targeted perturbation of current-task samples toward an old-class prototype.

Each iteration normalises the per-sample input gradient of the batch-mean squared
distance to the prototype, steps by ``alpha`` against it and clips to the valid
value range. There is no perturbation budget beyond that clipping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError, DimensionError, EmptyTaskError, NumericError, TargetError
from .net import Network, PrototypeMSE
from .proto import PrototypeStore, ncm_predict

GRAD_EPS = 1e-12


@dataclass
class AttackConfig:
    alpha: float = 0.1
    iterations: int = 3
    m: int = 100
    pixel_range: tuple[float, float] = (-np.inf, np.inf)
    filter_success: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        # iterations == 0 is allowed: it reduces to the closest-samples estimator
        if self.iterations < 0 or self.m < 1:
            raise ConfigError("need iterations >= 0 and m >= 1")
        lo, hi = self.pixel_range
        if not lo < hi:
            raise ConfigError(f"empty pixel range {self.pixel_range}")


@dataclass
class BackwardLedger:
    """Input-gradient evaluations made while estimating drift, one record per attack."""

    records: list[tuple[int, int, int]] = field(default_factory=list)  # (task, class, passes)
    task: int = 0

    def add(self, target: int, passes: int) -> None:
        self.records.append((self.task, int(target), int(passes)))

    def per_task(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t, _, n in self.records:
            out[t] = out.get(t, 0) + n
        return out

    @property
    def total(self) -> int:
        return sum(n for _, _, n in self.records)


@dataclass
class AdversarialBatch:
    samples: np.ndarray
    source_indices: np.ndarray
    target_class: int
    success_mask: np.ndarray

    @property
    def successful(self) -> np.ndarray:
        return self.samples[self.success_mask]


def select_closest(net_prev: Network, current_data: LabeledDataset | np.ndarray, prototype,
                   m: int, features: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``min(m, N)`` samples whose old embedding is nearest ``prototype``.

    Sorted by distance, ties by index. ``features`` may carry precomputed embeddings.
    """
    x = current_data.samples if isinstance(current_data, LabeledDataset) else np.asarray(current_data)
    if len(x) == 0:
        raise EmptyTaskError("no current-task samples to select from")
    feats = net_prev.forward_features(x) if features is None else features
    p = np.asarray(prototype, dtype=np.float64)
    if p.shape != (feats.shape[1],):
        raise DimensionError(f"prototype shape {p.shape} vs feature dim {feats.shape[1]}")
    d = np.sum((np.asarray(feats, dtype=np.float64) - p) ** 2, axis=1)
    order = np.lexsort((np.arange(len(d)), d))
    return order[:min(m, len(d))]


def perturb_towards(net_prev: Network, samples, prototype, cfg: AttackConfig,
                    ledger: BackwardLedger | None = None, target: int = -1,
                    trace: list[np.ndarray] | None = None) -> np.ndarray:
    """Run ``cfg.iterations`` normalised gradient steps; returns perturbed copies."""
    lo, hi = cfg.pixel_range
    x = np.clip(np.array(samples, dtype=net_prev.dtype), lo, hi)
    objective = PrototypeMSE(np.asarray(prototype, dtype=np.float64))
    for _ in range(cfg.iterations):
        g = net_prev.input_gradient(x, objective).astype(np.float64)
        norms = np.sqrt(np.sum(g * g, axis=1))
        live = norms > GRAD_EPS
        step = np.zeros_like(g)
        step[live] = g[live] / norms[live, None]
        x = np.clip(x - (cfg.alpha * step).astype(x.dtype), lo, hi)
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite adversarial sample")
        if trace is not None:
            trace.append(x.copy())
    if ledger is not None:
        ledger.add(target, cfg.iterations)
    return x


def filter_successful(net_prev: Network, adv, store: PrototypeStore, target: int,
                      old_classes: Iterable[int] | None = None,
                      source_indices: np.ndarray | None = None) -> AdversarialBatch:
    """Mark samples whose old embedding is NCM-classified as ``target`` among ``old_classes``."""
    cs = store.classes if old_classes is None else sorted(int(c) for c in old_classes)
    if target not in cs or target not in store:
        raise TargetError(f"class {target} is not an old class with a prototype")
    adv = np.asarray(adv)
    pred = ncm_predict(net_prev.forward_features(adv), store, cs)
    idx = np.arange(len(adv)) if source_indices is None else np.asarray(source_indices)
    return AdversarialBatch(adv, idx, int(target), pred == target)


def clip(x, pixel_range) -> np.ndarray:
    return np.clip(x, *pixel_range)
