"""Class-incremental task streams: synthetic Gaussian clusters and small image files.

File formats
------------
idx     big-endian IDX pair: images (magic 0x00000803, dims n,h,w) and labels
        (magic 0x00000801, dims n), one byte per value.
csv     ``label,f0,f1,...`` one sample per line, features are 0..255 bytes.
raw-u8  16-byte little-endian header ``(magic, n, h, w)`` as uint32, then ``n``
        records of one label byte followed by ``h*w`` pixel bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
RAW_U8_MAGIC = 0x38555752  # b"RWU8" little-endian
FORMATS = ("idx", "csv", "raw-u8")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    pixel_range: tuple[float, float]
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ConfigError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        object.__setattr__(self, "samples", _frozen(np.asarray(self.samples, dtype=np.float32)))
        object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))
        object.__setattr__(self, "pixel_range", (float(self.pixel_range[0]), float(self.pixel_range[1])))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def class_ids(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels)]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.pixel_range, self.image_shape)

    def of_class(self, k: int) -> np.ndarray:
        return self.samples[self.labels == k]

    def by_class(self) -> dict[int, np.ndarray]:
        return {k: self.of_class(k) for k in self.class_ids}


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    if not datasets:
        raise ConfigError("nothing to concatenate")
    first = datasets[0]
    return LabeledDataset(np.concatenate([d.samples for d in datasets]),
                          np.concatenate([d.labels for d in datasets]),
                          first.pixel_range, first.image_shape)


@dataclass(frozen=True)
class TaskStream:
    tasks: list[LabeledDataset]
    test_tasks: list[LabeledDataset]
    class_order_seed: int
    class_order: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def task_classes(self, t: int) -> list[int]:
        return self.tasks[t].class_ids

    @property
    def pixel_range(self) -> tuple[float, float]:
        return self.tasks[0].pixel_range


def split_tasks(dataset: LabeledDataset, T: int, class_order_seed: int,
                test: LabeledDataset | None = None) -> TaskStream:
    """Shuffle the classes, cut them into ``T`` equal groups, relabel in task order.

    After splitting, task ``t`` holds labels ``t*c .. (t+1)*c - 1`` so the head can
    grow by appending rows. ``class_order[j]`` is the original id of new label ``j``.
    """
    classes = np.array(dataset.class_ids)
    if T < 1 or len(classes) % T:
        raise ConfigError(f"{len(classes)} classes cannot be split into {T} equal tasks")
    if test is not None and set(test.class_ids) - set(classes.tolist()):
        raise ConfigError("test split has classes absent from training split")
    rng = np.random.default_rng(class_order_seed)
    order = rng.permutation(classes)
    remap = {int(c): j for j, c in enumerate(order)}
    per = len(classes) // T

    def cut(ds: LabeledDataset, shuffle: bool) -> list[LabeledDataset]:
        labels = np.array([remap[int(y)] for y in ds.labels], dtype=np.int64)
        out = []
        for t in range(T):
            idx = np.flatnonzero((labels >= t * per) & (labels < (t + 1) * per))
            if shuffle:
                idx = rng.permutation(idx)
            out.append(LabeledDataset(ds.samples[idx], labels[idx], ds.pixel_range, ds.image_shape))
        return out

    tasks = cut(dataset, shuffle=True)
    test_tasks = cut(test, shuffle=False) if test is not None else []
    return TaskStream(tasks, test_tasks, class_order_seed, [int(c) for c in order])


def _cluster_means(rng, n_classes, dim, separation, max_tries=10_000):
    # rejection sampling keeps every pair of means at least `separation` apart
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < n_classes:
        tries += 1
        if tries > max_tries:
            raise ConfigError(f"cannot place {n_classes} separated clusters in {dim} dimensions")
        v = rng.standard_normal(dim)
        v = separation * v / np.linalg.norm(v)
        if all(np.linalg.norm(v - u) >= separation for u in means):
            means.append(v)
    return np.stack(means)


def make_synthetic_dataset(n_classes: int, dim: int, samples_per_class: int,
                           cluster_spread: float, seed: int, separation: float | None = None,
                           test_samples_per_class: int | None = None
                           ) -> tuple[LabeledDataset, LabeledDataset, np.ndarray]:
    """Isotropic Gaussian clusters whose means sit on a sphere of radius ``separation``."""
    if cluster_spread <= 0:
        raise ConfigError("cluster_spread must be positive")
    if separation is None:
        separation = 4.0 * cluster_spread
    n_test = samples_per_class if test_samples_per_class is None else test_samples_per_class
    rng = np.random.default_rng(seed)
    means = _cluster_means(rng, n_classes, dim, separation)

    def draw(n):
        x = np.concatenate([m + cluster_spread * rng.standard_normal((n, dim)) for m in means])
        y = np.repeat(np.arange(n_classes), n)
        return x, y

    xtr, ytr = draw(samples_per_class)
    xte, yte = draw(n_test)
    allx = np.concatenate([xtr, xte])
    pad = 3.0 * cluster_spread
    lo, hi = float(allx.min() - pad), float(allx.max() + pad)
    return (LabeledDataset(xtr, ytr, (lo, hi)), LabeledDataset(xte, yte, (lo, hi)), means)


def make_synthetic_stream(n_classes: int, classes_per_task: int, dim: int, samples_per_class: int,
                          cluster_spread: float, seed: int, separation: float | None = None,
                          test_samples_per_class: int | None = None,
                          class_order_seed: int | None = None) -> TaskStream:
    if classes_per_task < 1 or n_classes % classes_per_task:
        raise ConfigError(f"{n_classes} classes not divisible into tasks of {classes_per_task}")
    train, test, _ = make_synthetic_dataset(n_classes, dim, samples_per_class, cluster_spread,
                                            seed, separation, test_samples_per_class)
    order_seed = seed if class_order_seed is None else class_order_seed
    return split_tasks(train, n_classes // classes_per_task, order_seed, test)


# image files

def _remap_labels(labels: np.ndarray, num_classes: int | None) -> np.ndarray:
    if labels.size and labels.min() < 0:
        raise FormatError(f"negative label {int(labels.min())}")
    if num_classes is not None and labels.size and labels.max() >= num_classes:
        raise FormatError(f"label {int(labels.max())} outside declared range 0..{num_classes - 1}")
    uniq = np.unique(labels)
    return np.searchsorted(uniq, labels)


def _need(buf: bytes, offset: int, n: int, what: str) -> None:
    if len(buf) < offset + n:
        raise ParseError(f"truncated {what}: need {n} bytes, have {len(buf) - offset}", len(buf))


def _read_idx(buf: bytes, expect_magic: int) -> np.ndarray:
    _need(buf, 0, 4, "IDX header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expect_magic:
        raise FormatError(f"IDX magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    _need(buf, 4, 4 * ndim, "IDX dims")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    off = 4 + 4 * ndim
    size = int(np.prod(dims))
    _need(buf, off, size, "IDX payload")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=off).reshape(dims)


def load_image_dataset(path: str | Path, format: str, labels_path: str | Path | None = None,
                       num_classes: int | None = None) -> LabeledDataset:
    """Read a uint8 image file into a dataset scaled to [0, 1]; labels become 0..C-1."""
    if format not in FORMATS:
        raise ConfigError(f"unknown format {format!r}, expected one of {FORMATS}")
    path = Path(path)
    if format == "csv":
        rows = []
        labels = []
        width = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    vals = [int(v) for v in line.split(",")]
                except ValueError as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from None
                if width is None:
                    width = len(vals)
                elif len(vals) != width:
                    raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(vals)}")
                if any(not 0 <= v <= 255 for v in vals[1:]):
                    raise FormatError(f"{path}:{lineno}: pixel outside 0..255")
                labels.append(vals[0])
                rows.append(vals[1:])
        x = np.array(rows, dtype=np.float32).reshape(len(rows), -1)
        y = np.array(labels, dtype=np.int64)
        shape = None
    elif format == "idx":
        if labels_path is None:
            raise ConfigError("idx format needs a labels file")
        images = _read_idx(path.read_bytes(), IDX_IMAGES_MAGIC)
        y = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC).astype(np.int64)
        if len(y) != len(images):
            raise FormatError(f"{len(images)} images but {len(y)} labels")
        shape = (1,) + images.shape[1:]
        x = images.reshape(len(images), -1).astype(np.float32)
    else:
        buf = path.read_bytes()
        _need(buf, 0, 16, "raw-u8 header")
        magic, n, h, w = struct.unpack("<4I", buf[:16])
        if magic != RAW_U8_MAGIC:
            raise FormatError(f"raw-u8 magic {magic:#010x}, expected {RAW_U8_MAGIC:#010x}")
        rec = 1 + h * w
        _need(buf, 16, n * rec, "raw-u8 payload")
        data = np.frombuffer(buf, dtype=np.uint8, count=n * rec, offset=16).reshape(n, rec)
        y = data[:, 0].astype(np.int64)
        x = data[:, 1:].astype(np.float32)
        shape = (1, h, w)
    y = _remap_labels(y, num_classes)
    return LabeledDataset(x / 255.0, y, (0.0, 1.0), shape)


def _to_u8(ds: LabeledDataset) -> np.ndarray:
    return np.clip(np.rint(ds.samples * 255.0), 0, 255).astype(np.uint8)


def write_image_dataset(ds: LabeledDataset, path: str | Path, format: str,
                        labels_path: str | Path | None = None) -> None:
    """Inverse of :func:`load_image_dataset` for [0, 1]-scaled data."""
    x = _to_u8(ds)
    y = np.asarray(ds.labels)
    if y.size and (y.min() < 0 or y.max() > 255):
        raise FormatError("labels must fit in one byte")
    n = len(y)
    if ds.image_shape is not None:
        h, w = ds.image_shape[-2:]
    else:
        h, w = 1, ds.dim
    if format == "csv":
        with open(path, "w") as fh:
            for label, row in zip(y, x):
                fh.write(",".join([str(int(label))] + [str(int(v)) for v in row]) + "\n")
    elif format == "idx":
        if labels_path is None:
            raise ConfigError("idx format needs a labels file")
        with open(path, "wb") as fh:
            fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
            fh.write(x.tobytes())
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
            fh.write(y.astype(np.uint8).tobytes())
    elif format == "raw-u8":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4I", RAW_U8_MAGIC, n, h, w))
            fh.write(np.concatenate([y.astype(np.uint8)[:, None], x], axis=1).tobytes())
    else:
        raise ConfigError(f"unknown format {format!r}")
