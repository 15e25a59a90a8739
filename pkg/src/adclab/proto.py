"""Class prototypes (mean embeddings) and nearest-class-mean classification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import LabeledDataset
from .errors import DimensionError, EmptyClassError, EvaluationError
from .net import Network


@dataclass
class PrototypeStore:
    feature_dim: int
    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    tasks: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, k) -> bool:
        return int(k) in self.vectors

    def __getitem__(self, k) -> np.ndarray:
        return self.vectors[int(k)]

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)

    def set(self, k: int, vector, task: int) -> None:
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.feature_dim,):
            raise DimensionError(f"prototype shape {v.shape}, store dim {self.feature_dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite prototype for class {k}")
        self.vectors[int(k)] = v
        self.tasks[int(k)] = int(task)

    def copy(self) -> "PrototypeStore":
        return PrototypeStore(self.feature_dim, {k: v.copy() for k, v in self.vectors.items()},
                              dict(self.tasks))

    def merge(self, other: "PrototypeStore") -> "PrototypeStore":
        out = self.copy()
        for k in other.classes:
            out.set(k, other[k], other.tasks[k])
        return out

    def matrix(self, classes: Iterable[int] | None = None) -> tuple[list[int], np.ndarray]:
        cs = self.classes if classes is None else sorted(int(c) for c in classes)
        if not cs:
            return cs, np.zeros((0, self.feature_dim))
        return cs, np.stack([self.vectors[c] for c in cs])


def class_means(feats: np.ndarray, labels: np.ndarray, classes: Iterable[int]) -> dict[int, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    out = {}
    for k in classes:
        sel = feats[labels == k]
        if len(sel) == 0:
            raise EmptyClassError(f"class {k} has no samples")
        out[int(k)] = sel.sum(axis=0) / len(sel)
    return out


def mean_embedding(net: Network, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        raise EmptyClassError("cannot average zero samples")
    feats = np.asarray(net.forward_features(x), dtype=np.float64)
    return feats.sum(axis=0) / len(feats)


def compute_prototypes(net: Network, data: LabeledDataset, task: int = 0,
                       classes: Iterable[int] | None = None) -> PrototypeStore:
    """Per-class mean embedding, accumulated in float64."""
    classes = data.class_ids if classes is None else list(classes)
    store = PrototypeStore(net.feature_dim)
    if not classes:
        return store
    feats = net.forward_features(data.samples)
    for k, v in class_means(feats, data.labels, classes).items():
        store.set(k, v, task)
    return store


def _sq_dists(emb: np.ndarray, protos: np.ndarray) -> np.ndarray:
    diff = emb[:, None, :] - protos[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def ncm_predict(embeddings, store: PrototypeStore, classes: Iterable[int] | None = None,
                chunk: int = 2048) -> np.ndarray:
    """Nearest prototype in L2 for each row; ties go to the smallest class id."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 1:
        emb = emb[None, :]
    cs, protos = store.matrix(classes)
    if not cs:
        raise EvaluationError("no prototypes to classify against")
    if emb.shape[1] != store.feature_dim:
        raise DimensionError(f"embedding dim {emb.shape[1]}, store dim {store.feature_dim}")
    ids = np.asarray(cs)
    out = np.empty(len(emb), dtype=np.int64)
    for s in range(0, len(emb), chunk):
        out[s:s + chunk] = ids[np.argmin(_sq_dists(emb[s:s + chunk], protos), axis=1)]
    return out


def ncm_classify(embedding, store: PrototypeStore) -> int:
    emb = np.asarray(embedding)
    if emb.ndim != 1:
        raise DimensionError("ncm_classify takes a single embedding vector")
    return int(ncm_predict(emb, store)[0])


def classify_dataset(net: Network, store: PrototypeStore, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise EvaluationError("empty dataset")
    pred = ncm_predict(net.forward_features(data.samples), store)
    return float(np.mean(pred == data.labels))


def dump_prototypes(store: PrototypeStore, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id", "task"] + [f"v_{i}" for i in range(store.feature_dim)])
        for k in store.classes:
            w.writerow([k, store.tasks[k]] + [repr(float(x)) for x in store[k]])


def load_prototypes(path: str | Path) -> PrototypeStore:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        store = PrototypeStore(len(header) - 2)
        for row in r:
            store.set(int(row[0]), [float(x) for x in row[2:]], int(row[1]))
    return store
