"""Dataset ingestion (CSV with min-max scaling) and synthetic Gaussian blobs."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Dataset


class IngestError(ValueError):
    """Malformed input data; the message names the offending row/column."""


@dataclass(frozen=True)
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, x) -> "MinMaxScaler":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.min(axis=0), x.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def transform(self, x) -> np.ndarray:
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        scaled = np.where(span > 0, (np.asarray(x, dtype=np.float64) - self.minimum) / safe, 0.0)
        return np.clip(scaled, 0.0, 1.0)

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.span + self.minimum

    def to_json(self) -> str:
        return json.dumps({"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "MinMaxScaler":
        raw = json.loads(text)
        return cls(np.array(raw["minimum"], dtype=np.float64), np.array(raw["maximum"], dtype=np.float64))


@dataclass(frozen=True)
class LabelledData:
    dataset: Dataset
    scaler: MinMaxScaler
    classes: tuple
    feature_names: tuple


def ingest_csv(path, label_column: str) -> LabelledData:
    """Read a headed CSV, factorize labels, and scale each feature into [0, 1]."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        names = tuple(h for i, h in enumerate(header) if i != label_idx)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
            values = []
            for col, cell in enumerate(row):
                if col == label_idx:
                    continue
                try:
                    values.append(float(cell))
                except ValueError:
                    raise IngestError(f"{path}:{lineno}: column {header[col]!r} is not numeric: {cell!r}") from None
            rows.append(values)
            labels.append(row[label_idx].strip())
    if not rows:
        raise IngestError(f"{path}: no data rows")
    raw = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        bad = np.argwhere(~np.isfinite(raw))[0]
        raise IngestError(f"{path}:{bad[0] + 2}: column {names[bad[1]]!r} is not finite")
    classes = tuple(sorted(set(labels), key=_label_sort_key))
    index = {c: i for i, c in enumerate(classes)}
    scaler = MinMaxScaler.fit(raw)
    y = np.array([index[l] for l in labels], dtype=np.int64)
    return LabelledData(Dataset(scaler.transform(raw), y, len(classes)), scaler, classes, names)


def _label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


@dataclass(frozen=True)
class SyntheticSpec:
    samples: int = 200
    features: int = 20
    classes: int = 3
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.features < 1 or self.classes < 2:
            raise ValueError("synthetic data needs samples >= 1, features >= 1, classes >= 2")
        if self.separation < 0 or self.noise < 0:
            raise ValueError("separation and noise must be non-negative")


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced Gaussian blobs around class centres ``separation`` apart from the origin."""
    rng = np.random.default_rng(spec.seed)
    centres = rng.normal(size=(spec.classes, spec.features))
    centres *= spec.separation / np.linalg.norm(centres, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(spec.samples) % spec.classes)
    x = centres[labels] + spec.noise * rng.normal(size=(spec.samples, spec.features))
    return Dataset(MinMaxScaler.fit(x).transform(x), labels, spec.classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    cut = len(data) - max(1, int(round(test_fraction * len(data))))
    return data.subset(np.sort(order[:cut])), data.subset(np.sort(order[cut:]))
