"""Dataset readers and the class-incremental task split."""

from __future__ import annotations

import csv
import gzip
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import DTYPE

log = logging.getLogger(__name__)

DATASETS = ("synthetic-blobs", "idx-images", "cifar-binary", "csv")

_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MAX_LABEL = 99  # covers both the 10- and 100-class variants


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise DataError(f"inputs {self.X.shape} and labels {self.y.shape} do not line up")

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: LabeledSet
    test: LabeledSet | None = None  # a source-provided test split, if any
    name: str = ""


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"corrupt gzip stream in {path}", 0) from exc
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX array: two zero bytes, a type code, the rank, big-endian dims, data."""
    if len(raw) < 4:
        raise FormatError("truncated IDX header", len(raw))
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError("IDX magic must start with two zero bytes", 0)
    if raw[2] not in _IDX_TYPES:
        raise FormatError(f"unknown IDX type code 0x{raw[2]:02x}", 2)
    dtype, rank = _IDX_TYPES[raw[2]], raw[3]
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError("truncated IDX dimensions", len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * k:8 + 4 * k], "big") for k in range(rank))
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = header + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"IDX payload is {len(raw) - header} bytes, dims {dims} need {expected - header}", min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)


def read_idx(images_path, labels_path) -> LabeledSet:
    images = parse_idx(_read_bytes(images_path))
    labels = parse_idx(_read_bytes(labels_path))
    if images.ndim < 2 or labels.ndim != 1:
        raise DataError(f"IDX images need rank >= 2 and labels rank 1, got {images.ndim} and {labels.ndim}")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.dtype.kind in "if":
        bad = np.flatnonzero((labels < 0) | (labels != np.floor(labels)))
        if len(bad):
            header = 8
            raise FormatError(f"label {labels[bad[0]]} out of range", header + int(bad[0]) * labels.dtype.itemsize)
    X = images.reshape(len(images), -1).astype(DTYPE)
    if images.dtype == np.uint8:
        X /= 255.0
    return LabeledSet(X, labels.astype(np.int64))


def parse_cifar_binary(raw: bytes) -> LabeledSet:
    """Fixed-size records: one label byte then 3072 pixel bytes (channel-major)."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"{len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records", whole)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    bad = np.flatnonzero(rec[:, 0] > CIFAR_MAX_LABEL)
    if len(bad):
        raise FormatError(f"label {rec[bad[0], 0]} out of range", int(bad[0]) * CIFAR_RECORD)
    return LabeledSet(rec[:, 1:].astype(DTYPE) / 255.0, rec[:, 0].astype(np.int64))


def read_cifar_binary(paths) -> LabeledSet:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [parse_cifar_binary(_read_bytes(p)) for p in paths]
    return LabeledSet(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]))


def parse_csv(raw: bytes) -> LabeledSet:
    """Numeric CSV with the label in the first column.  A non-numeric first row is a header.

    Features are kept as given; only image formats are rescaled.
    """
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("csv is not valid UTF-8", exc.start) from exc
    X_rows, labels, width = [], [], None
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        start, offset = offset, offset + len(line.encode("utf-8"))
        if not line.strip():
            continue
        row = next(csv.reader([line]))
        if width is None and not X_rows:
            try:
                [float(v) for v in row]
            except ValueError:
                continue  # header
        if width is None:
            width = len(row)
            if width < 2:
                raise FormatError("csv needs a label column and at least one feature column", start)
        if len(row) != width:
            raise FormatError(f"line {lineno} has {len(row)} fields, expected {width}", start)
        try:
            label = float(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}", start) from exc
        if not label.is_integer() or label < 0:
            raise FormatError(f"line {lineno}: label {row[0]!r} out of range", start)
        if not all(np.isfinite(values)):
            raise FormatError(f"line {lineno}: non-finite feature", start)
        labels.append(int(label))
        X_rows.append(values)
    if not X_rows:
        raise DataError("csv has no data rows")
    return LabeledSet(np.asarray(X_rows, dtype=DTYPE), np.asarray(labels, dtype=np.int64))


def read_csv_dataset(path) -> LabeledSet:
    return parse_csv(_read_bytes(path))


def synthetic_blobs(
    num_classes: int = 10,
    dim: int = 32,
    per_class: int = 200,
    noise: float = 1.0,
    seed: int = 0,
) -> LabeledSet:
    """Gaussian class clusters around random unit-variance centres."""
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ConfigError("blob classes, dim and per_class must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    centres = rng.standard_normal((num_classes, dim))
    y = np.repeat(np.arange(num_classes), per_class)
    X = centres[y] + noise * rng.standard_normal((len(y), dim))
    return LabeledSet(X.astype(DTYPE), y)


def load_dataset(kind: str, path=None, *, labels_path=None, test_path=None, test_labels_path=None, blobs: dict | None = None, seed: int = 0) -> Dataset:
    if kind == "synthetic-blobs":
        return Dataset(synthetic_blobs(seed=seed, **(blobs or {})), None, kind)
    if path is None:
        raise ConfigError(f"dataset {kind!r} needs a data path")
    if kind == "idx-images":
        if labels_path is None:
            raise ConfigError("idx-images dataset needs labels_path")
        train = read_idx(path, labels_path)
        test = read_idx(test_path, test_labels_path) if test_path else None
    elif kind == "cifar-binary":
        train = read_cifar_binary([p.strip() for p in str(path).split(",")])
        test = read_cifar_binary(test_path) if test_path else None
    elif kind == "csv":
        train = read_csv_dataset(path)
        test = read_csv_dataset(test_path) if test_path else None
    else:
        raise ConfigError(f"unknown dataset {kind!r}; expected one of {', '.join(DATASETS)}")
    if test is not None and test.X.shape[1] != train.X.shape[1]:
        raise DataError(f"test inputs have {test.X.shape[1]} features, train has {train.X.shape[1]}")
    return Dataset(train, test, kind)


# ---------------------------------------------------------------------------
# task split


@dataclass
class TaskData:
    index: int  # 1-based
    class_range: tuple[int, int]  # contiguous relabelled ids [lo, hi)
    train: LabeledSet
    test: LabeledSet

    @property
    def num_classes(self) -> int:
        return self.class_range[1] - self.class_range[0]


@dataclass
class Scenario:
    tasks: list[TaskData]
    class_order: list[int]  # original label of each relabelled class

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def num_classes(self) -> int:
        return len(self.class_order)

    def test_union(self, upto: int | None = None) -> LabeledSet:
        tasks = self.tasks[: upto or len(self.tasks)]
        return LabeledSet(np.concatenate([t.test.X for t in tasks]), np.concatenate([t.test.y for t in tasks]))


def split_tasks(dataset: Dataset, num_tasks: int, seed: int, test_fraction: float = 0.2) -> Scenario:
    """Shuffle the classes by seed and deal them into contiguous tasks.

    Classes are relabelled 0..C-1 in task order.  When C is not divisible
    by the number of tasks the earliest tasks get one extra class.  Without
    a source test split each class is split train/test by ``test_fraction``.
    """
    classes = sorted(int(c) for c in np.unique(dataset.train.y))
    if num_tasks < 1:
        raise ConfigError("num_tasks must be at least 1")
    if len(classes) < num_tasks:
        raise ConfigError(f"{len(classes)} classes cannot fill {num_tasks} tasks")
    if not 0 < test_fraction < 1 and dataset.test is None:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = [classes[k] for k in rng.permutation(len(classes))]
    relabel = {c: k for k, c in enumerate(order)}

    if dataset.test is None:
        train_idx, test_idx = [], []
        for c in order:
            idx = np.flatnonzero(dataset.train.y == c)
            idx = idx[rng.permutation(len(idx))]
            cut = int(round(len(idx) * test_fraction))
            if len(idx) >= 2:
                cut = min(max(cut, 1), len(idx) - 1)
            test_idx.append(idx[:cut])
            train_idx.append(idx[cut:])
        tr_src = dataset.train
        te_src = dataset.train
        tr_sel = np.concatenate(train_idx)
        te_sel = np.concatenate(test_idx)
    else:
        missing = set(int(c) for c in np.unique(dataset.test.y)) - set(classes)
        if missing:
            raise DataError(f"test split has classes absent from training: {sorted(missing)}")
        tr_src, te_src = dataset.train, dataset.test
        tr_sel = np.arange(len(tr_src))
        te_sel = np.arange(len(te_src))

    base, extra = divmod(len(classes), num_tasks)
    tasks, lo = [], 0
    for t in range(num_tasks):
        hi = lo + base + (1 if t < extra else 0)
        originals = set(order[lo:hi])

        def pick(src: LabeledSet, sel: np.ndarray) -> LabeledSet:
            keep = sel[np.isin(src.y[sel], list(originals))]
            keep = np.sort(keep)
            return LabeledSet(src.X[keep], np.array([relabel[int(c)] for c in src.y[keep]], dtype=np.int64))

        tasks.append(TaskData(t + 1, (lo, hi), pick(tr_src, tr_sel), pick(te_src, te_sel)))
        lo = hi
    for task in tasks:
        if len(task.train) == 0:
            raise DataError(f"task {task.index} has no training samples")
    return Scenario(tasks, order)
