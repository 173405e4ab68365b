#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Supervised feature selection
Per-dimension normalization and one-vs-all orthogonal least squares selection
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import ConsistencyError, ParameterError, ValidationError
from workers import parallel_map

logger = logging.getLogger(__name__)

# Columns per chunk when computing statistics on wide float32 tables
STATS_CHUNK = 4096
# Candidates whose orthogonalized norm falls below this fraction of their own norm are collinear
COLLINEAR_EPS = 1e-10
REORTHO_THRESHOLD = 1e-6


class FeatureTable(BaseModel):
    """
    Samples x features; column_ids map columns back to the raw concatenated vector
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    column_ids: np.ndarray
    means: Optional[np.ndarray] = None
    stds: Optional[np.ndarray] = None
    excluded: List[int] = Field(default_factory=list)

    @classmethod
    def from_array(cls, data: np.ndarray) -> 'FeatureTable':
        data = np.asarray(data)
        if data.ndim != 2:
            raise ValidationError(f"feature table must be 2D, got shape {data.shape}")
        return cls(data=data, column_ids=np.arange(data.shape[1], dtype=np.int64))

    @property
    def normalized(self) -> bool:
        return self.means is not None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def positions(self, ids: Sequence[int]) -> np.ndarray:
        """Column positions of raw column ids; raises on ids the table does not hold"""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.column_ids, ids)
        pos = np.clip(pos, 0, max(len(self.column_ids) - 1, 0))
        if len(self.column_ids) == 0 or np.any(self.column_ids[pos] != ids):
            missing = ids[(len(self.column_ids) == 0) | (self.column_ids[pos] != ids)]
            raise ConsistencyError(f"column ids not present in table: {missing[:10].tolist()}")
        return pos

    def normalize_rows(self, raw: np.ndarray, ids: Optional[Sequence[int]] = None) -> np.ndarray:
        """
        Apply the stored training statistics to new samples
        raw holds the columns listed in ids (all table columns when ids is None)
        """
        if not self.normalized:
            raise ConsistencyError("table carries no normalization statistics")
        pos = np.arange(len(self.column_ids)) if ids is None else self.positions(ids)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != len(pos):
            raise ConsistencyError(f"expected {len(pos)} columns, got {raw.shape[-1]}")
        return (raw - self.means[pos]) / self.stds[pos]


class OlsSelection(BaseModel):
    """Per-class ordered column ids with their error-reduction ratios"""
    per_class: Dict[int, List[int]]
    err: Dict[int, List[float]]
    residual: Dict[int, List[float]]

    @property
    def union(self) -> List[int]:
        return sorted({i for ids in self.per_class.values() for i in ids})


def _column_stats(data: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    means = np.empty(data.shape[1])
    stds = np.empty(data.shape[1])
    for start in range(0, data.shape[1], STATS_CHUNK):
        block = np.asarray(data[:, start:start + STATS_CHUNK], dtype=np.float64)
        means[start:start + STATS_CHUNK] = block.mean(axis=0)
        stds[start:start + STATS_CHUNK] = block.std(axis=0)  # population (n) convention
    return means, stds


def normalize_features(table: Union[FeatureTable, np.ndarray]) -> FeatureTable:
    """
    Z-score every column with its own statistics (population variance, divisor n)
    Zero-variance columns are excluded and their ids recorded.
    """
    if isinstance(table, np.ndarray):
        table = FeatureTable.from_array(table)
    if table.data.shape[0] < 2:
        raise ValidationError("normalization needs at least 2 samples")
    if not np.all(np.isfinite(table.data)):
        raise ValidationError("feature table contains non-finite values")

    means, stds = _column_stats(table.data)
    constant = stds <= 1e-12 * np.maximum(1.0, np.abs(means))
    keep = np.flatnonzero(~constant)
    excluded = table.column_ids[constant].tolist()
    if excluded:
        logger.warning(f"Excluding {len(excluded)} zero-variance columns from selection")

    dtype = table.data.dtype if np.issubdtype(table.data.dtype, np.floating) else np.float64
    out = np.empty((table.data.shape[0], len(keep)), dtype=dtype)
    for start in range(0, len(keep), STATS_CHUNK):
        cols = keep[start:start + STATS_CHUNK]
        block = np.asarray(table.data[:, cols], dtype=np.float64)
        out[:, start:start + len(cols)] = (block - means[cols]) / stds[cols]

    return FeatureTable(
        data=out,
        column_ids=table.column_ids[keep],
        means=means[keep],
        stds=stds[keep],
        excluded=sorted(table.excluded + excluded)
    )


def select_for_class(X: np.ndarray, target: np.ndarray, budget: int,
                     err_floor: float = 1e-8) -> Tuple[List[int], List[float], List[float], np.ndarray]:
    """
    Greedy forward OLS for one target

    Candidates are never orthogonalized as a whole; only their correlations with
    the residual and their remaining norms are updated after each pick.

    Returns:
        (column positions, ERR per step, residual energy per step, orthonormal basis n x steps)
    """
    target = np.asarray(target, dtype=np.float64)
    target_energy = float(target @ target)
    n, d = X.shape

    col_norm2 = np.einsum('ij,ij->j', X, X, dtype=np.float64)
    proj_norm2 = col_norm2.copy()
    available = col_norm2 > 0
    residual = target.copy()
    basis: List[np.ndarray] = []
    selected: List[int] = []
    errs: List[float] = []
    residuals: List[float] = []

    for _ in range(budget):
        corr = np.asarray(X.T @ residual.astype(X.dtype), dtype=np.float64)
        valid = available & (proj_norm2 > COLLINEAR_EPS * col_norm2)
        if not valid.any():
            break
        ratio = np.full(d, -np.inf)
        ratio[valid] = corr[valid] ** 2 / (proj_norm2[valid] * target_energy)
        best = int(np.argmax(ratio))
        if ratio[best] < err_floor:
            break

        w = np.asarray(X[:, best], dtype=np.float64).copy()
        for q in basis:
            w -= (q @ w) * q
        if basis:
            Q = np.stack(basis, axis=1)
            if np.max(np.abs(Q.T @ w)) > REORTHO_THRESHOLD * np.linalg.norm(w):
                w -= Q @ (Q.T @ w)
        q = w / np.linalg.norm(w)

        residual = residual - (q @ residual) * q
        proj_norm2 = np.maximum(proj_norm2 - np.asarray(X.T @ q.astype(X.dtype), dtype=np.float64) ** 2, 0.0)
        available[best] = False

        basis.append(q)
        selected.append(best)
        errs.append(float(ratio[best]))
        residuals.append(float(residual @ residual))

    Q = np.stack(basis, axis=1) if basis else np.empty((n, 0))
    return selected, errs, residuals, Q


def ols_select(table: FeatureTable, labels: np.ndarray, budget_per_class: int,
               err_floor: float = 1e-8, threads: Optional[int] = None) -> OlsSelection:
    """
    One-vs-all OLS selection; the target for class c is +1 on c and -1 elsewhere

    Returns column ids (not positions) so selections stay valid against the raw vector.
    """
    if budget_per_class < 1:
        raise ParameterError(f"OLS budget must be >= 1, got {budget_per_class}")
    labels = np.asarray(labels)
    n_cols = table.data.shape[1]
    budget = budget_per_class
    if budget > n_cols:
        logger.warning(f"OLS budget {budget} exceeds {n_cols} usable columns, truncating")
        budget = n_cols

    classes = [int(c) for c in np.unique(labels)]

    def run(cls: int):
        target = np.where(labels == cls, 1.0, -1.0)
        positions, errs, residuals, _ = select_for_class(table.data, target, budget, err_floor)
        if len(positions) < budget:
            logger.debug(f"Class {cls}: selection stopped after {len(positions)} of {budget} steps")
        return cls, positions, errs, residuals

    results = parallel_map(run, classes, threads)
    selection = OlsSelection(
        per_class={cls: table.column_ids[pos].tolist() for cls, pos, _, _ in results},
        err={cls: errs for cls, _, errs, _ in results},
        residual={cls: res for cls, _, _, res in results}
    )
    logger.info(f"✓ OLS kept {len(selection.union)} of {n_cols} dimensions "
                f"({budget} per class, {len(classes)} classes)")
    return selection


def reduce(table: FeatureTable, selection: OlsSelection) -> FeatureTable:
    """Restrict the table to the union of per-class selections, ascending id order"""
    ids = selection.union
    if not ids:
        raise ConsistencyError("OLS selection is empty")
    pos = table.positions(ids)
    return FeatureTable(
        data=table.data[:, pos],
        column_ids=table.column_ids[pos],
        means=None if table.means is None else table.means[pos],
        stds=None if table.stds is None else table.stds[pos]
    )


def write_selection_report(selection: OlsSelection, path: Union[str, Path],
                           descriptors: Optional[Sequence[str]] = None) -> None:
    """Tab-separated (class, step, column, ERR, descriptor) lines"""
    lines = ["class\tstep\tcolumn\terr\tdescriptor"]
    for cls in sorted(selection.per_class):
        for step, (col, err) in enumerate(zip(selection.per_class[cls], selection.err[cls]), start=1):
            label = descriptors[col] if descriptors is not None else ''
            lines.append(f"{cls}\t{step}\t{col}\t{err:.6e}\t{label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding='utf-8')
