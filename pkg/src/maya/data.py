"""CSV ingestion, encoding, quantile normalization and splitting.

A prepared dataset lives in a directory::

    meta        JSON: schema, vocabularies, target statistics
    num.f64     float64 LE, rows x n_num
    cat.u32     uint32 LE,  rows x n_cat
    y.f64       float64 LE, rows (class index or standardized target)
    split.idx   three u32 lists (train, val, test), each prefixed by its length
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtri

logger = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "regression")
KINDS = ("numerical", "categorical", "target")
UNKNOWN = 0


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Schema:
    columns: List[str]
    kinds: Dict[str, str]
    task: str
    num_classes: int = 0

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise SchemaError(f"unknown task {self.task!r}")
        bad = {c: k for c, k in self.kinds.items() if k not in KINDS}
        if bad:
            raise SchemaError(f"unknown column kinds: {bad}")
        targets = [c for c in self.columns if self.kinds[c] == "target"]
        if len(targets) != 1:
            raise SchemaError(f"schema needs exactly one target column, found {targets}")
        if not self.numerical and not self.categorical:
            raise SchemaError("schema needs at least one feature column")
        if self.task == "binary":
            if self.num_classes not in (0, 2):
                raise SchemaError("binary task has exactly 2 classes")
            self.num_classes = 2
        if self.task == "multiclass" and self.num_classes < 2:
            raise SchemaError("multiclass task needs num_classes >= 2")

    @property
    def target(self) -> str:
        return next(c for c in self.columns if self.kinds[c] == "target")

    @property
    def numerical(self) -> List[str]:
        return [c for c in self.columns if self.kinds[c] == "numerical"]

    @property
    def categorical(self) -> List[str]:
        return [c for c in self.columns if self.kinds[c] == "categorical"]

    @classmethod
    def from_text(cls, text: str) -> "Schema":
        """Parse ``key = value`` lines: ``task``, ``num_classes`` and one
        ``column.<name> = <kind>`` line per column, in file order."""
        columns, kinds = [], {}
        task, num_classes = None, 0
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"schema line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "task":
                task = value
            elif key == "num_classes":
                num_classes = int(value)
            elif key.startswith("column."):
                name = key[len("column."):]
                columns.append(name)
                kinds[name] = value
            else:
                raise SchemaError(f"schema line {lineno}: unknown key {key!r}")
        if task is None:
            raise SchemaError("schema is missing 'task'")
        return cls(columns, kinds, task, num_classes)

    @classmethod
    def read(cls, path) -> "Schema":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = [f"task = {self.task}"]
        if self.task == "multiclass":
            lines.append(f"num_classes = {self.num_classes}")
        lines += [f"column.{c} = {self.kinds[c]}" for c in self.columns]
        return "\n".join(lines) + "\n"


@dataclass
class RawTable:
    numerical: Dict[str, np.ndarray]  # NaN marks missing
    categorical: Dict[str, List[Optional[str]]]
    target: List[str]
    lines: List[int]  # source line of each row, for error messages

    def __len__(self) -> int:
        return len(self.target)


def _parse_float(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def load_csv(path, schema: Schema) -> RawTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in schema.columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        extra = [h for h in header if h not in schema.kinds]
        if extra:
            warnings.warn(f"ignoring undeclared columns {extra}")
        pos = {c: header.index(c) for c in schema.columns}
        num: Dict[str, List[float]] = {c: [] for c in schema.numerical}
        cat: Dict[str, List[Optional[str]]] = {c: [] for c in schema.categorical}
        target: List[str] = []
        lines: List[int] = []
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            lineno = reader.line_num
            if len(row) < len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            y = row[pos[schema.target]].strip()
            if not y:
                raise DataError(f"{path}:{lineno}: empty target")
            if schema.task == "regression" and math.isnan(_parse_float(y)):
                raise DataError(f"{path}:{lineno}: unparseable target {y!r}")
            target.append(y)
            lines.append(lineno)
            for c in num:
                num[c].append(_parse_float(row[pos[c]].strip()))
            for c in cat:
                v = row[pos[c]].strip()
                cat[c].append(v if v else None)
    return RawTable({c: np.array(v, dtype=np.float64) for c, v in num.items()}, cat, target, lines)


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def n(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def get(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split(n_rows: int, seed: int, ratios: Tuple[float, float, float] = (0.64, 0.16, 0.20)) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/val/test slices. Validation and
    test sizes are floored; train takes the remainder."""
    if n_rows < 5:
        raise DataError(f"need at least 5 rows to split, got {n_rows}")
    perm = np.random.default_rng(seed).permutation(n_rows)
    n_val = int(math.floor(ratios[1] * n_rows + 1e-9))
    n_test = int(math.floor(ratios[2] * n_rows + 1e-9))
    n_train = n_rows - n_val - n_test
    return DatasetSplit(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


@dataclass
class QuantileColumn:
    """Empirical-CDF map of one training column onto a standard normal."""

    values: np.ndarray  # distinct sorted training values
    levels: np.ndarray  # CDF level of each distinct value

    @classmethod
    def fit(cls, train_column: np.ndarray) -> "QuantileColumn":
        x = np.sort(np.asarray(train_column, dtype=np.float64))
        if x.size < 2 or x[0] == x[-1]:
            raise DataError("quantile transform needs at least 2 distinct values")
        n = x.size
        levels = (np.arange(n) + 0.5) / n
        values, inverse = np.unique(x, return_inverse=True)
        # tied values share the mean level of their run
        sums = np.bincount(inverse, weights=levels)
        counts = np.bincount(inverse)
        return cls(values, sums / counts)

    @property
    def delta(self) -> float:
        return float(self.levels[0]) if self.levels.size else 0.0

    def transform(self, x) -> np.ndarray:
        p = np.interp(np.asarray(x, dtype=np.float64), self.values, self.levels)
        return ndtri(p)


def fit_quantile(train_column) -> QuantileColumn:
    return QuantileColumn.fit(train_column)


def apply_quantile(state: QuantileColumn, x):
    return state.transform(x)


@dataclass
class FeatureInfo:
    """What the model needs to know about a dataset to be built."""

    n_num: int
    cat_cardinalities: List[int]
    task: str
    num_classes: int

    @property
    def k(self) -> int:
        return self.n_num + len(self.cat_cardinalities)


@dataclass
class EncodedDataset:
    num: np.ndarray  # [N, n_num] float64
    cat: np.ndarray  # [N, n_cat] uint32
    y: np.ndarray  # [N] float64 (class index for classification)
    split: DatasetSplit
    task: str
    num_classes: int = 0
    num_columns: List[str] = field(default_factory=list)
    cat_columns: List[str] = field(default_factory=list)
    vocabularies: Dict[str, List[str]] = field(default_factory=dict)
    classes: List[str] = field(default_factory=list)
    target_mean: float = 0.0
    target_std: float = 1.0
    medians: Dict[str, float] = field(default_factory=dict)
    dropped: List[str] = field(default_factory=list)
    seed: int = 0

    @property
    def info(self) -> FeatureInfo:
        return FeatureInfo(self.num.shape[1], [len(self.vocabularies[c]) + 1 for c in self.cat_columns],
                           self.task, self.num_classes)

    @property
    def labels(self) -> np.ndarray:
        return self.y.astype(np.int64) if self.task != "regression" else self.y

    def destandardize(self, pred: np.ndarray) -> np.ndarray:
        return np.asarray(pred) * self.target_std + self.target_mean

    def target_original(self, idx: np.ndarray) -> np.ndarray:
        return self.destandardize(self.y[idx])

    def rows(self, idx) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.num[idx], self.cat[idx].astype(np.int64), self.labels[idx]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.num, self.cat, self.y, self.split.train, self.split.val, self.split.test):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def _meta(self) -> dict:
        return {
            "format": 1,
            "task": self.task,
            "num_classes": self.num_classes,
            "num_columns": self.num_columns,
            "cat_columns": self.cat_columns,
            "vocabularies": self.vocabularies,
            "classes": self.classes,
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "medians": self.medians,
            "dropped": self.dropped,
            "seed": self.seed,
            "n_rows": int(self.y.shape[0]),
            "split_sizes": [len(self.split.train), len(self.split.val), len(self.split.test)],
        }

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "meta").write_text(json.dumps(self._meta(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        self.num.astype("<f8").tofile(d / "num.f64")
        self.cat.astype("<u4").tofile(d / "cat.u32")
        self.y.astype("<f8").tofile(d / "y.f64")
        with open(d / "split.idx", "wb") as fh:
            for part in (self.split.train, self.split.val, self.split.test):
                fh.write(np.array([len(part)], dtype="<u4").tobytes())
                fh.write(np.asarray(part, dtype="<u4").tobytes())

    @classmethod
    def load(cls, directory) -> "EncodedDataset":
        d = Path(directory)
        meta = json.loads((d / "meta").read_text(encoding="utf-8"))
        n = meta["n_rows"]
        n_num, n_cat = len(meta["num_columns"]), len(meta["cat_columns"])
        num = np.fromfile(d / "num.f64", dtype="<f8").astype(np.float64).reshape(n, n_num)
        cat = np.fromfile(d / "cat.u32", dtype="<u4").astype(np.uint32).reshape(n, n_cat)
        y = np.fromfile(d / "y.f64", dtype="<f8").astype(np.float64)
        raw = np.fromfile(d / "split.idx", dtype="<u4")
        parts, pos = [], 0
        for _ in range(3):
            length = int(raw[pos])
            parts.append(raw[pos + 1:pos + 1 + length].astype(np.int64))
            pos += 1 + length
        return cls(num, cat, y, DatasetSplit(*parts), meta["task"], meta["num_classes"],
                   meta["num_columns"], meta["cat_columns"], meta["vocabularies"], meta["classes"],
                   meta["target_mean"], meta["target_std"], meta["medians"], meta["dropped"], meta["seed"])


def _sort_labels(labels: Sequence[str]) -> List[str]:
    uniq = sorted(set(labels))
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return uniq


def encode(raw: RawTable, split_: DatasetSplit, schema: Schema, seed: int = 0) -> EncodedDataset:
    """Fit every statistic on the train rows and encode all rows."""
    n = len(raw)
    if split_.n != n:
        raise DataError(f"split covers {split_.n} rows but table has {n}")
    tr = split_.train

    num_cols, blocks, medians, dropped = [], [], {}, []
    for c in schema.numerical:
        col = raw.numerical[c]
        train_vals = col[tr][~np.isnan(col[tr])]
        if train_vals.size == 0:
            raise DataError(f"numerical column {c!r} has no values in the training split")
        med = float(np.median(train_vals))
        try:
            qt = QuantileColumn.fit(train_vals)
        except DataError:
            warnings.warn(f"dropping constant numerical column {c!r}")
            dropped.append(c)
            continue
        filled = np.where(np.isnan(col), med, col)
        num_cols.append(c)
        medians[c] = med
        blocks.append(qt.transform(filled))
    num = np.stack(blocks, axis=1) if blocks else np.zeros((n, 0))

    vocabs: Dict[str, List[str]] = {}
    cat_blocks = []
    for c in schema.categorical:
        values = raw.categorical[c]
        vocab = sorted({values[i] for i in tr if values[i] is not None})
        vocabs[c] = vocab
        lookup = {v: i + 1 for i, v in enumerate(vocab)}
        cat_blocks.append(np.array([lookup.get(v, UNKNOWN) for v in values], dtype=np.uint32))
    cat = np.stack(cat_blocks, axis=1) if cat_blocks else np.zeros((n, 0), dtype=np.uint32)
    if num.shape[1] + cat.shape[1] == 0:
        raise DataError("no usable feature columns remain")

    classes: List[str] = []
    mean, std = 0.0, 1.0
    if schema.task == "regression":
        t = np.array([float(v) for v in raw.target])
        mean = float(t[tr].mean())
        std = float(t[tr].std())
        if std == 0.0:
            std = 1.0
        y = (t - mean) / std
    else:
        classes = _sort_labels(raw.target)
        if len(classes) > schema.num_classes:
            raise DataError(f"found {len(classes)} classes, schema declares {schema.num_classes}")
        lookup = {v: i for i, v in enumerate(classes)}
        y = np.array([lookup[v] for v in raw.target], dtype=np.float64)

    return EncodedDataset(num, cat, y, split_, schema.task, schema.num_classes, num_cols,
                          list(schema.categorical), vocabs, classes, mean, std, medians, dropped, seed)


def prepare(csv_path, schema: Schema, seed: int = 0) -> EncodedDataset:
    raw = load_csv(csv_path, schema)
    return encode(raw, split(len(raw), seed), schema, seed)


def batches(indices: np.ndarray, batch_size: int, seed: int = 0, epoch: int = 0,
            shuffle: bool = True, drop_singletons: bool = False) -> Iterator[np.ndarray]:
    """Yield index blocks; the last block may be short. With
    ``drop_singletons`` a trailing block of size 1 is skipped."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise DataError("cannot batch an empty index list")
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    order = indices
    if shuffle:
        order = indices[np.random.default_rng([seed, epoch]).permutation(indices.size)]
    for start in range(0, order.size, batch_size):
        block = order[start:start + batch_size]
        if drop_singletons and block.size == 1:
            logger.warning("skipping a batch of size 1 (needs another candidate)")
            continue
        yield block
