"""Prototype drift estimation and compensation.

``adc_compensate`` and ``sdc_compensate`` only ever see the stored prototypes and
the current task's data. ``oracle_drift`` needs old-task data and exists for
evaluation; ``nme_prototypes`` is the exemplar-based reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .attack import AttackConfig, BackwardLedger, filter_successful, perturb_towards, select_closest
from .data import LabeledDataset
from .errors import ConfigError, EmptyClassError, EmptyTaskError, EvaluationError, OracleUnavailableError
from .net import Network
from .proto import PrototypeStore, class_means, mean_embedding

log = logging.getLogger(__name__)

UNDEFINED_NORM = 1e-9


@dataclass
class DriftEstimate:
    method: str
    deltas: dict[int, np.ndarray] = field(default_factory=dict)
    n_contributing: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.deltas)

    def add(self, k: int, delta, n: int) -> None:
        self.deltas[int(k)] = np.asarray(delta, dtype=np.float64)
        self.n_contributing[int(k)] = int(n)


def _apply(store: PrototypeStore, est: DriftEstimate, task: int) -> PrototypeStore:
    out = store.copy()
    for k in est.classes:
        out.set(k, store[k] + est.deltas[k], task)
    return out


def _old(store: PrototypeStore, old_classes) -> list[int]:
    return store.classes if old_classes is None else sorted(int(c) for c in old_classes)


def _embed_both(net_prev: Network, net_new: Network, x: np.ndarray):
    return (np.asarray(net_prev.forward_features(x), dtype=np.float64),
            np.asarray(net_new.forward_features(x), dtype=np.float64))


def adc_compensate(net_prev: Network, net_new: Network, store: PrototypeStore,
                   current_data: LabeledDataset, cfg: AttackConfig,
                   ledger: BackwardLedger | None = None, old_classes: Iterable[int] | None = None,
                   task: int | None = None) -> tuple[PrototypeStore, DriftEstimate]:
    """Move every old prototype by the mean old-to-new embedding shift of its
    successful adversarial samples. Classes without a success keep their prototype."""
    if len(current_data) == 0:
        raise EmptyTaskError("no current-task samples")
    classes = _old(store, old_classes)
    x = current_data.samples
    feats_prev = net_prev.forward_features(x)
    est = DriftEstimate("adc")
    for k in classes:
        idx = select_closest(net_prev, x, store[k], cfg.m, features=feats_prev)
        adv = perturb_towards(net_prev, x[idx], store[k], cfg, ledger, target=k)
        if cfg.filter_success:
            used = filter_successful(net_prev, adv, store, k, classes, idx).successful
        else:
            used = adv
        if len(used) == 0:
            log.info("adc: no successful adversarial sample for class %d, prototype kept", k)
            est.add(k, np.zeros(store.feature_dim), 0)
            continue
        old, new = _embed_both(net_prev, net_new, used)
        est.add(k, (new - old).sum(axis=0) / len(used), len(used))
    t = task if task is not None else max(store.tasks.values(), default=0) + 1
    return _apply(store, est, t), est


def nearest_compensate(net_prev: Network, net_new: Network, store: PrototypeStore,
                       current_data: LabeledDataset, m: int,
                       old_classes: Iterable[int] | None = None) -> tuple[PrototypeStore, DriftEstimate]:
    """Unweighted mean drift of the ``m`` raw samples closest to each old prototype."""
    if len(current_data) == 0:
        raise EmptyTaskError("no current-task samples")
    x = current_data.samples
    old_all, new_all = _embed_both(net_prev, net_new, x)
    est = DriftEstimate("nearest")
    for k in _old(store, old_classes):
        idx = select_closest(net_prev, x, store[k], m, features=old_all)
        est.add(k, (new_all[idx] - old_all[idx]).sum(axis=0) / len(idx), len(idx))
    return _apply(store, est, max(store.tasks.values(), default=0) + 1), est


def sdc_compensate(net_prev: Network, net_new: Network, store: PrototypeStore,
                   current_data: LabeledDataset, sigma: float,
                   old_classes: Iterable[int] | None = None,
                   task: int | None = None) -> tuple[PrototypeStore, DriftEstimate]:
    """Gaussian-window weighted mean of current-sample drift around each old prototype.

    Weights use old-space distances. The exponent is shifted by its maximum before
    exponentiation, which leaves the normalised weights unchanged but keeps small
    ``sigma`` from underflowing every weight to zero.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if len(current_data) == 0:
        raise EmptyTaskError("no current-task samples")
    old, new = _embed_both(net_prev, net_new, current_data.samples)
    delta = new - old
    est = DriftEstimate("sdc")
    for k in _old(store, old_classes):
        expo = -np.sum((old - store[k]) ** 2, axis=1) / (2.0 * sigma ** 2)
        w = np.exp(expo - expo.max())
        total = w.sum()
        if not np.isfinite(total) or total <= 0:
            log.warning("sdc: all weights vanish for class %d, prototype kept", k)
            est.add(k, np.zeros(store.feature_dim), 0)
            continue
        est.add(k, (w[:, None] * delta).sum(axis=0) / total, int(np.count_nonzero(w)))
    t = task if task is not None else max(store.tasks.values(), default=0) + 1
    return _apply(store, est, t), est


def oracle_drift(net_prev: Network, net_new: Network,
                 old_data_per_class: Mapping[int, np.ndarray] | None) -> DriftEstimate:
    """True prototype displacement computed from retained old data (evaluation only)."""
    if not old_data_per_class:
        raise OracleUnavailableError("oracle drift needs retained old-class data")
    est = DriftEstimate("oracle")
    for k in sorted(old_data_per_class):
        x = old_data_per_class[k]
        if len(x) == 0:
            raise EmptyClassError(f"class {k} has no retained samples")
        old, new = _embed_both(net_prev, net_new, x)
        est.add(k, new.sum(axis=0) / len(x) - old.sum(axis=0) / len(x), len(x))
    return est


def drift_quality(estimate: DriftEstimate, truth: DriftEstimate) -> dict[int, float]:
    """Cosine similarity per class; NaN where either vector is (numerically) zero."""
    if truth.method != "oracle":
        raise EvaluationError("drift quality is measured against an oracle estimate")
    if set(estimate.deltas) != set(truth.deltas):
        raise EvaluationError("estimate and truth cover different classes")
    out = {}
    for k in truth.classes:
        a, b = estimate.deltas[k], truth.deltas[k]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        out[k] = float(a @ b / (na * nb)) if na >= UNDEFINED_NORM and nb >= UNDEFINED_NORM else float("nan")
    return out


def mean_quality(quality: Mapping[int, float]) -> tuple[float, int]:
    """Mean over defined classes and the number of undefined ones."""
    vals = np.array(list(quality.values()), dtype=np.float64)
    ok = ~np.isnan(vals)
    n_undef = int((~ok).sum())
    return (float(vals[ok].mean()) if ok.any() else float("nan")), n_undef


# exemplar baseline

@dataclass
class ExemplarStore:
    per_class: int
    samples: dict[int, np.ndarray] = field(default_factory=dict)
    budget: int | None = None

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.samples.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.samples)

    def update(self, other: "ExemplarStore") -> None:
        for k, v in other.samples.items():
            if len(v) > self.per_class:
                raise ConfigError(f"class {k}: {len(v)} exemplars exceed {self.per_class}")
            self.samples[k] = v
        if self.budget is not None and self.total > self.budget:
            raise ConfigError(f"{self.total} exemplars exceed the budget of {self.budget}")


def herding(feats: np.ndarray, E: int) -> np.ndarray:
    """Greedy selection whose running mean tracks the class mean (no repeats)."""
    feats = np.asarray(feats, dtype=np.float64)
    mu = feats.mean(axis=0)
    chosen: list[int] = []
    acc = np.zeros_like(mu)
    avail = np.ones(len(feats), dtype=bool)
    for j in range(1, min(E, len(feats)) + 1):
        cand = (acc + feats) / j
        d = np.sum((cand - mu) ** 2, axis=1)
        d[~avail] = np.inf
        i = int(np.argmin(d))
        chosen.append(i)
        avail[i] = False
        acc += feats[i]
    return np.array(chosen, dtype=np.int64)


def select_exemplars(data: LabeledDataset, E: int, policy: str = "herding",
                     net: Network | None = None, seed: int = 0) -> ExemplarStore:
    """Up to ``E`` samples per class, kept in their original dataset order."""
    if E < 1:
        raise ConfigError("need at least one exemplar per class")
    rng = np.random.default_rng(seed)
    store = ExemplarStore(E)
    for k in data.class_ids:
        x = data.of_class(k)
        if E >= len(x):
            idx = np.arange(len(x))
        elif policy == "random":
            idx = rng.choice(len(x), size=E, replace=False)
        elif policy == "herding":
            if net is None:
                raise ConfigError("herding needs a network to embed samples")
            idx = herding(net.forward_features(x), E)
        else:
            raise ConfigError(f"unknown exemplar policy {policy!r}")
        store.samples[k] = x[np.sort(idx)].copy()
    return store


def nme_prototypes(net_new: Network, exemplars: ExemplarStore,
                   current_data: LabeledDataset | None = None, task: int = 0) -> PrototypeStore:
    """Old prototypes from exemplar means, new ones from the full current data."""
    store = PrototypeStore(net_new.feature_dim)
    for k in exemplars.classes:
        if len(exemplars.samples[k]) == 0:
            raise EmptyClassError(f"class {k} has no exemplars")
        store.set(k, mean_embedding(net_new, exemplars.samples[k]), task)
    if current_data is not None and len(current_data):
        feats = net_new.forward_features(current_data.samples)
        for k, v in class_means(feats, current_data.labels, current_data.class_ids).items():
            store.set(k, v, task)
    return store


# continual adversarial transferability

@dataclass
class TransferDiagnostic:
    target: int
    old_dist_clean: np.ndarray
    new_dist_clean: np.ndarray
    old_dist_adv: np.ndarray
    new_dist_adv: np.ndarray

    @property
    def r_clean(self) -> float:
        return _pearson(self.old_dist_clean, self.new_dist_clean)

    @property
    def r_adv(self) -> float:
        return _pearson(self.old_dist_adv, self.new_dist_adv)


def _pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def _dist(feats, p, metric):
    feats = np.asarray(feats, dtype=np.float64)
    if metric == "l2":
        return np.linalg.norm(feats - p, axis=1)
    if metric == "cosine":
        den = np.linalg.norm(feats, axis=1) * np.linalg.norm(p)
        return 1.0 - feats @ p / np.where(den > 0, den, 1.0)
    raise ConfigError(f"unknown metric {metric!r}")


def transferability(net_prev: Network, net_new: Network, current_data: LabeledDataset,
                    store: PrototypeStore, target: int, oracle_prototype, cfg: AttackConfig,
                    metric: str = "cosine") -> TransferDiagnostic:
    """Distances of clean and perturbed samples to the old prototype (old space) and to
    the oracle prototype (new space), for the ``cfg.m`` samples closest to ``target``."""
    x = current_data.samples
    idx = select_closest(net_prev, x, store[target], cfg.m)
    clean = x[idx]
    adv = perturb_towards(net_prev, clean, store[target], cfg)
    p_old, p_new = store[target], np.asarray(oracle_prototype, dtype=np.float64)
    return TransferDiagnostic(
        target,
        _dist(net_prev.forward_features(clean), p_old, metric),
        _dist(net_new.forward_features(clean), p_new, metric),
        _dist(net_prev.forward_features(adv), p_old, metric),
        _dist(net_new.forward_features(adv), p_new, metric),
    )
