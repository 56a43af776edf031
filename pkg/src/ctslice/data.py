"""Loading, standardization, patient-grouped folds and mini-batching for the
UCI "relative location of CT slices" table.

The CSV has one header row and 386 columns per data row: the patient id,
384 shape-context descriptor values and the reference location (cm).
Columns are matched by position, not by header name.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

N_FEATURES = 384
N_COLUMNS = N_FEATURES + 2
STD_FLOOR = 1e-8

PER_FEATURE = "per-feature"
PER_SAMPLE = "per-sample"
NORM_MODES = (PER_FEATURE, PER_SAMPLE)


class DataFormatError(ValueError):
    """Raised for unreadable or malformed input tables."""


@dataclass(frozen=True)
class Sample:
    patient_id: int
    features: np.ndarray
    target: float


@dataclass(frozen=True)
class Dataset:
    """Column-oriented view of the samples, in file row order."""

    patient_ids: np.ndarray  # int64 [N]
    features: np.ndarray  # float64 [N, n_features]
    targets: np.ndarray  # float64 [N]

    def __post_init__(self):
        n = len(self.patient_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n or self.targets.shape != (n,):
            raise ValueError("patient_ids, features and targets disagree in length")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.patient_ids[i]), self.features[i], float(self.targets[i]))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def patients(self) -> np.ndarray:
        """Distinct patient identifiers, ascending."""
        return np.unique(self.patient_ids)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.patient_ids[idx], self.features[idx], self.targets[idx])


def load_dataset(path) -> Dataset:
    """Read the slice-localization CSV.

    Row numbers in error messages are file line numbers (the header is row 1).
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"{path}: no such file")

    pids, feats, targets = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != N_COLUMNS:
                raise DataFormatError(f"row {lineno}: expected {N_COLUMNS} columns, got {len(row)}")
            try:
                values = np.array(row, dtype=np.float64)
            except ValueError as exc:
                raise DataFormatError(f"row {lineno}: non-numeric cell ({exc})") from None
            if not np.all(np.isfinite(values)):
                raise DataFormatError(f"row {lineno}: non-finite value")
            pid = values[0]
            if pid < 0 or pid != int(pid):
                raise DataFormatError(f"row {lineno}: patient id must be a non-negative integer")
            pids.append(int(pid))
            feats.append(values[1:-1])
            targets.append(values[-1])

    if not targets:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(
        np.asarray(pids, dtype=np.int64),
        np.vstack(feats),
        np.asarray(targets, dtype=np.float64),
    )


@dataclass(frozen=True)
class Normalizer:
    """z-score standardizer.

    In per-sample mode ``mean``/``std`` are unused placeholders (zeros/ones)
    and the statistics are taken from each vector at apply time.
    """

    mean: np.ndarray
    std: np.ndarray
    mode: str = PER_FEATURE

    def __call__(self, features: np.ndarray) -> np.ndarray:
        return apply_normalizer(self, features)

    @classmethod
    def identity(cls, n_features: int = N_FEATURES) -> "Normalizer":
        return cls(np.zeros(n_features), np.ones(n_features), PER_FEATURE)


def _clamped_std(x: np.ndarray, axis) -> np.ndarray:
    std = x.std(axis=axis)
    return np.where(std < STD_FLOOR, 1.0, std)


def fit_normalizer(train, mode: str = PER_FEATURE) -> Normalizer:
    """Fit population mean/std per feature column on ``train``.

    ``train`` is a Dataset or an [N, F] array.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    x = train.features if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on an empty dataset")
    n_features = x.shape[1]
    if mode == PER_SAMPLE:
        return Normalizer(np.zeros(n_features), np.ones(n_features), PER_SAMPLE)
    return Normalizer(x.mean(axis=0), _clamped_std(x, axis=0), PER_FEATURE)


def apply_normalizer(norm: Normalizer, features: np.ndarray) -> np.ndarray:
    """Standardize one vector [F] or a batch [N, F]; returns float64."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != len(norm.mean):
        raise ValueError(f"expected {len(norm.mean)} features, got {x.shape[-1]}")
    if norm.mode == PER_SAMPLE:
        mu = x.mean(axis=-1, keepdims=True)
        return (x - mu) / _clamped_std(x, axis=-1)[..., None]
    return (x - norm.mean) / norm.std


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: dict = field(default_factory=dict)  # patient_id -> fold

    def fold_of(self, patient_ids: np.ndarray) -> np.ndarray:
        lookup = self.assignments
        return np.fromiter((lookup[int(p)] for p in patient_ids), dtype=np.int64, count=len(patient_ids))

    def split(self, dataset: Dataset, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices (train, test) for ``fold``."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} out of range for k={self.k}")
        folds = self.fold_of(dataset.patient_ids)
        return np.flatnonzero(folds != fold), np.flatnonzero(folds == fold)

    def patients_in(self, fold: int) -> list[int]:
        return sorted(p for p, f in self.assignments.items() if f == fold)


def make_patient_folds(dataset: Dataset, k: int, seed: int) -> FoldPlan:
    """Shuffle patients with a seeded PRNG and deal them round-robin into k folds."""
    if k < 2:
        raise ValueError("k must be at least 2")
    patients = dataset.patients
    if k > len(patients):
        raise ValueError(f"k={k} exceeds the number of patients ({len(patients)})")
    order = np.random.default_rng(seed).permutation(patients)
    return FoldPlan(k, seed, {int(p): i % k for i, p in enumerate(order)})


def iterate_batches(samples, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield index arrays covering every sample once, in a per-(seed, epoch) order.

    ``samples`` is a sample count or any sized collection (indices refer to it).
    """
    n_samples = samples if isinstance(samples, (int, np.integer)) else len(samples)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if n_samples < 1:
        raise ValueError("cannot batch an empty sample set")
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start:start + batch_size]
