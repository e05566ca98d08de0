"""Cell-level splits, train-only normalisation and sliding windows."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ProvenanceError, StateError, ValidationError
from .features import N_HI, FeatureTable, check_train_provenance

log = logging.getLogger(__name__)


class SplitMode(str, Enum):
    FIXED = "fixed"
    LOOCV = "loocv"


@dataclass(frozen=True)
class SplitPlan:
    train_cells: tuple[str, ...]
    test_cells: tuple[str, ...]
    seed: int
    mode: SplitMode
    train_fraction: float | None = None
    fold_index: int | None = None

    def __post_init__(self):
        overlap = set(self.train_cells) & set(self.test_cells)
        if overlap:
            raise ProvenanceError(f"cells in both train and test: {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "fold_index": self.fold_index,
            "train_cells": list(self.train_cells),
            "test_cells": list(self.test_cells),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple(d["train_cells"]), tuple(d["test_cells"]), int(d["seed"]), SplitMode(d["mode"]),
                   d.get("train_fraction"), d.get("fold_index"))


def split_cells(cell_ids, mode="fixed", seed: int = 0, train_fraction: float = 0.8) -> list[SplitPlan]:
    """One plan for a fixed-ratio split, one per held-out cell for LOOCV."""
    mode = SplitMode(mode)
    cells = sorted(set(str(c) for c in cell_ids))
    if len(cells) < 2:
        raise ValidationError("need at least 2 cells to split")
    if mode is SplitMode.LOOCV:
        return [
            SplitPlan(tuple(c for c in cells if c != held), (held,), seed, mode, fold_index=i)
            for i, held in enumerate(cells)
        ]
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(cells))
    n_train = min(max(int(round(train_fraction * len(cells))), 1), len(cells) - 1)
    shuffled = [cells[i] for i in order]
    return [SplitPlan(tuple(sorted(shuffled[:n_train])), tuple(sorted(shuffled[n_train:])), seed, mode, train_fraction)]


def partition_table(table: FeatureTable, plan: SplitPlan) -> tuple[FeatureTable, FeatureTable]:
    """Rows of the plan's train and test cells, tagged accordingly."""
    known = set(table.cells)
    missing = (set(plan.train_cells) | set(plan.test_cells)) - known
    if missing:
        raise ValidationError(f"split names cells absent from the table: {sorted(missing)}")
    train = table.subset(np.isin(table.cell_id, plan.train_cells)).tagged("train")
    test = table.subset(np.isin(table.cell_id, plan.test_cells)).tagged("test")
    if set(train.cells) & set(test.cells):
        raise ProvenanceError("train and test rows share a cell")
    return train, test


def _scale(x, lo, hi):
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


@dataclass
class Normalizer:
    """Min-max scaling fitted on training rows: features to [-1, 1], SOH to [0, 1].

    Values outside the training range map outside those intervals; nothing
    is clipped.
    """

    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None
    target_min: float | None = None
    target_max: float | None = None

    @property
    def fitted(self) -> bool:
        return self.feature_min is not None

    def fit(self, table: FeatureTable) -> "Normalizer":
        check_train_provenance(table, "normalizer fit")
        if len(table) == 0:
            raise ValidationError("cannot fit a normalizer on zero rows")
        self.feature_min = table.hi.min(axis=0)
        self.feature_max = table.hi.max(axis=0)
        self.target_min = float(table.soh.min())
        self.target_max = float(table.soh.max())
        return self

    def _require(self):
        if not self.fitted:
            raise StateError("normalizer used before fit")

    def transform_features(self, hi) -> np.ndarray:
        self._require()
        return _scale(np.asarray(hi, dtype=float), self.feature_min, self.feature_max)

    def transform_target(self, soh) -> np.ndarray:
        self._require()
        soh = np.asarray(soh, dtype=float)
        span = self.target_max - self.target_min
        if span == 0:
            return np.zeros_like(soh)
        return (soh - self.target_min) / span

    def inverse_target(self, y) -> np.ndarray:
        self._require()
        return np.asarray(y, dtype=float) * (self.target_max - self.target_min) + self.target_min

    def to_dict(self) -> dict:
        self._require()
        return {
            "feature_min": self.feature_min.tolist(),
            "feature_max": self.feature_max.tolist(),
            "target_min": self.target_min,
            "target_max": self.target_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["feature_min"], float), np.asarray(d["feature_max"], float),
                   float(d["target_min"]), float(d["target_max"]))


def fit_normalizer(table: FeatureTable) -> Normalizer:
    return Normalizer().fit(table)


def apply_normalizer(norm: Normalizer, table: FeatureTable) -> FeatureTable:
    out = FeatureTable(table.cell_id, table.cycle_index, norm.transform_features(table.hi),
                       norm.transform_target(table.soh), table.partition)
    return out


@dataclass
class SequenceDataset:
    x: np.ndarray  # (N, k, d)
    y: np.ndarray  # (N,)
    cell_id: np.ndarray
    cycle_index: np.ndarray  # cycle of the last window step, where y is taken
    k: int
    features: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.y)


def make_windows(table: FeatureTable, k: int, features=None) -> SequenceDataset:
    """Sliding windows of k consecutive rows per cell; target is the last row's SOH.

    Rows are ordered by cycle index within each cell.  A cell with L rows
    gives max(0, L - k + 1) windows.
    """
    if k < 1:
        raise ValidationError("window length k must be >= 1")
    features = list(range(N_HI)) if features is None else [int(f) for f in features]
    xs, ys, cells, cycles = [], [], [], []
    for cell in table.cells:
        idx = np.flatnonzero(table.cell_id == cell)
        idx = idx[np.argsort(table.cycle_index[idx], kind="stable")]
        count = len(idx) - k + 1
        if count <= 0:
            log.info("cell %s: %d cycles < window %d, no windows", cell, len(idx), k)
            continue
        feats = table.hi[np.ix_(idx, features)]
        win = np.lib.stride_tricks.sliding_window_view(feats, k, axis=0)  # (count, d, k)
        xs.append(np.swapaxes(win, 1, 2))
        ys.append(table.soh[idx[k - 1 :]])
        cells.append(np.full(count, cell, dtype=object))
        cycles.append(table.cycle_index[idx[k - 1 :]])
    if not xs:
        d = len(features)
        return SequenceDataset(np.zeros((0, k, d)), np.zeros(0), np.zeros(0, dtype=object), np.zeros(0, dtype=int), k, features)
    return SequenceDataset(np.ascontiguousarray(np.concatenate(xs)), np.concatenate(ys), np.concatenate(cells),
                           np.concatenate(cycles), k, features)


def assert_disjoint(train: SequenceDataset, test: SequenceDataset) -> None:
    shared = set(train.cell_id.tolist()) & set(test.cell_id.tolist())
    if shared:
        raise ProvenanceError(f"train and test windows share cells {sorted(shared)}")
