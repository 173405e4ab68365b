#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gaussian-kernel SVM back-end
One-vs-all soft-margin classifiers, stratified cross-validation and KKT checks
"""

import logging
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.model_selection import KFold, StratifiedKFold
from sklearn.svm import SVC

from data_models import SvmConfig
from errors import DimensionError, ParameterError, ProtocolError, TrainingError, ValidationError
from ols import FeatureTable, normalize_features
from workers import parallel_map

logger = logging.getLogger(__name__)

# Kernel rows evaluated per block at prediction time
PREDICT_CHUNK = 2048

# (train_idx, val_idx) -> (training matrix, validation matrix)
FoldPreparer = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


class SvmBinary(BaseModel):
    """
    Decision f(x) = sum_i dual_coef[i] * K(sv_i, x) + bias; dual_coef = alpha * y
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    support_indices: Optional[np.ndarray] = None
    iterations: int = 0


class SvmModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    classes: List[int]
    c: float
    gamma: float
    binaries: List[SvmBinary]

    @property
    def n_features(self) -> int:
        return int(self.binaries[0].support_vectors.shape[1])

    def as_float32(self) -> 'SvmModel':
        return self.model_copy(update={'binaries': [
            b.model_copy(update={
                'support_vectors': b.support_vectors.astype(np.float32),
                'dual_coef': b.dual_coef.astype(np.float32),
            })
            for b in self.binaries
        ]})


class CvResult(BaseModel):
    fold_accuracies: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_accuracies))


class CrossValidator(BaseModel):
    """Seeded fold assignment; stratified folds keep class proportions"""
    folds: int = 5
    seed: int = 0
    stratified: bool = True

    def split(self, labels: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        labels = np.asarray(labels)
        if self.folds < 2:
            raise ParameterError(f"cross-validation needs >= 2 folds, got {self.folds}")
        classes, counts = np.unique(labels, return_counts=True)
        for cls, count in zip(classes, counts):
            if count < self.folds:
                raise ProtocolError(f"class {cls} has {count} samples, fewer than {self.folds} folds")
        if self.stratified:
            splitter = StratifiedKFold(n_splits=self.folds, shuffle=True, random_state=self.seed)
            return list(splitter.split(np.zeros(len(labels)), labels))
        splitter = KFold(n_splits=self.folds, shuffle=True, random_state=self.seed)
        return list(splitter.split(np.zeros(len(labels))))


def _as_array(X: Union[FeatureTable, np.ndarray]) -> np.ndarray:
    data = X.data if isinstance(X, FeatureTable) else X
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValidationError(f"SVM input must be a non-empty 2D table, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValidationError("SVM input contains non-finite values")
    return data


def default_gamma(X: np.ndarray) -> float:
    """1 / (dimension * overall feature variance)"""
    var = float(np.var(X))
    return 1.0 / (X.shape[1] * var) if var > 0 else 1.0 / X.shape[1]


def train_gsvm(X: Union[FeatureTable, np.ndarray], labels: np.ndarray, c: float,
               gamma: Optional[float] = None, tol: float = 1e-3, max_iter: int = 1_000_000,
               cache_mb: float = 200.0, gram_max_samples: int = 6000,
               threads: Optional[int] = None) -> SvmModel:
    """
    Train one binary Gaussian SVM per class (class vs rest)

    Small problems share one precomputed Gram matrix across the binary problems;
    larger ones let the solver cache kernel rows.
    """
    data = _as_array(X)
    labels = np.asarray(labels)
    if len(labels) != len(data):
        raise DimensionError(f"{len(data)} samples but {len(labels)} labels")
    if c <= 0:
        raise ParameterError(f"C must be > 0, got {c}")
    if gamma is None:
        gamma = default_gamma(data)
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    classes = [int(cls) for cls in np.unique(labels)]
    if len(classes) < 2:
        raise ProtocolError("SVM training needs at least 2 classes")

    gram = rbf_kernel(data, gamma=gamma) if len(data) <= gram_max_samples else None

    def fit(cls: int) -> SvmBinary:
        y = np.where(labels == cls, 1, -1)
        if gram is not None:
            solver = SVC(kernel='precomputed', C=c, tol=tol / 10, max_iter=max_iter)
            solver.fit(gram, y)
        else:
            solver = SVC(kernel='rbf', C=c, gamma=gamma, tol=tol / 10,
                         cache_size=cache_mb, max_iter=max_iter)
            solver.fit(data, y)
        iterations = int(np.max(solver.n_iter_))
        if iterations >= max_iter:
            raise TrainingError(f"SVM for class {cls} did not converge within {max_iter} iterations")
        support = np.asarray(solver.support_, dtype=np.int64)
        return SvmBinary(
            support_vectors=data[support],
            dual_coef=np.asarray(solver.dual_coef_[0], dtype=np.float64),
            bias=float(solver.intercept_[0]),
            support_indices=support,
            iterations=iterations
        )

    model = SvmModel(classes=classes, c=float(c), gamma=float(gamma),
                     binaries=parallel_map(fit, classes, threads))

    for cls, binary in zip(classes, model.binaries):
        violation = kkt_violation(binary, c, gamma)
        if violation > tol:
            raise TrainingError(f"SVM for class {cls} fails the KKT check: residual {violation:.2e} "
                                f"exceeds tolerance {tol:.0e}", stage='svm')
    n_sv = sum(len(b.dual_coef) for b in model.binaries)
    logger.info(f"✓ SVM trained: {len(classes)} classes, {n_sv} support vectors, "
                f"C={c:g}, gamma={gamma:.3e}")
    return model


def kkt_violation(binary: SvmBinary, c: float, gamma: float) -> float:
    """
    Largest KKT residual of one binary machine: the equality constraint, the box
    constraint, and |y f(x) - 1| on free support vectors (0 < alpha < C)
    """
    alpha = np.abs(binary.dual_coef)
    worst = abs(float(np.sum(binary.dual_coef))) / max(1.0, c)
    worst = max(worst, float(np.max(alpha - c, initial=0.0)) / c)

    free = (alpha > 1e-8 * c) & (alpha < c * (1 - 1e-8))
    if free.any():
        sv = np.asarray(binary.support_vectors, dtype=np.float64)
        f = rbf_kernel(sv[free], sv, gamma=gamma) @ binary.dual_coef + binary.bias
        y = np.sign(binary.dual_coef[free])
        worst = max(worst, float(np.max(np.abs(y * f - 1.0))))
    return worst


def decision_values(model: SvmModel, X: Union[FeatureTable, np.ndarray]) -> np.ndarray:
    """n x classes matrix of one-vs-all decision values"""
    data = _as_array(X)
    if data.shape[1] != model.n_features:
        raise DimensionError(f"model expects {model.n_features} features, got {data.shape[1]}")
    out = np.empty((len(data), len(model.classes)))
    for start in range(0, len(data), PREDICT_CHUNK):
        block = data[start:start + PREDICT_CHUNK]
        for col, binary in enumerate(model.binaries):
            kernel = rbf_kernel(block, np.asarray(binary.support_vectors, dtype=np.float64), gamma=model.gamma)
            out[start:start + len(block), col] = kernel @ np.asarray(binary.dual_coef, dtype=np.float64) + binary.bias
    return out


def predict_gsvm(model: SvmModel, X: Union[FeatureTable, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Labels by largest decision value (ties go to the lower class index) plus the decisions"""
    decisions = decision_values(model, X)
    labels = np.asarray(model.classes)[np.argmax(decisions, axis=1)]
    return labels, decisions


def normalized_fold(X: np.ndarray, train_idx: np.ndarray, val_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(train, validation) matrices z-scored with training-fold statistics"""
    train = normalize_features(X[train_idx])
    return train.data, train.normalize_rows(X[val_idx][:, train.column_ids])


def fold_accuracy(train: np.ndarray, val: np.ndarray, train_labels: np.ndarray, val_labels: np.ndarray,
                  params: SvmConfig, gamma_scale: float = 1.0) -> float:
    gamma = params.gamma if params.gamma is not None else default_gamma(np.asarray(train))
    model = train_gsvm(train, train_labels, params.c, gamma * gamma_scale, params.tol,
                       params.max_iter, params.cache_mb, params.gram_max_samples, threads=1)
    predicted, _ = predict_gsvm(model, val)
    return float(np.mean(predicted == val_labels))


def cross_validate(X: Union[FeatureTable, np.ndarray], labels: np.ndarray, params: SvmConfig,
                   cv: CrossValidator, threads: Optional[int] = None,
                   gamma_scale: float = 1.0) -> CvResult:
    """
    k-fold accuracy of the SVM; normalization statistics come from the training fold only
    """
    data = _as_array(X)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ProtocolError("cross-validation needs at least 2 classes")
    folds = cv.split(labels)
    accuracies = parallel_map(
        lambda split: fold_accuracy(*normalized_fold(data, split[0], split[1]),
                                    labels[split[0]], labels[split[1]], params, gamma_scale),
        folds, threads
    )
    return CvResult(fold_accuracies=accuracies)


def grid_search(X: Union[FeatureTable, np.ndarray], labels: np.ndarray, params: SvmConfig,
                cv: CrossValidator, threads: Optional[int] = None,
                prepare: Optional[FoldPreparer] = None) -> Tuple[float, float, float]:
    """
    Scan C over params.c_grid and gamma multipliers over params.gamma_grid
    Returns (C, gamma multiplier, CV accuracy); the first best cell wins ties.

    prepare(train_idx, val_idx) builds the fold matrices once per fold; the default
    z-scores with training-fold statistics.
    """
    labels = np.asarray(labels)
    if prepare is None:
        data = _as_array(X)

        def prepare(train_idx: np.ndarray, val_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            return normalized_fold(data, train_idx, val_idx)
    folds = cv.split(labels)
    prepared = parallel_map(lambda split: prepare(split[0], split[1]), folds, threads)

    best: Optional[Tuple[float, float, float]] = None
    for c in params.c_grid:
        for scale in params.gamma_grid:
            trial = params.model_copy(update={'c': c})
            scores = parallel_map(
                lambda i: fold_accuracy(prepared[i][0], prepared[i][1], labels[folds[i][0]],
                                        labels[folds[i][1]], trial, scale),
                list(range(len(folds))), threads
            )
            score = float(np.mean(scores))
            logger.debug(f"grid C={c:g} gamma x{scale:g}: {score:.4f}")
            if best is None or score > best[0]:
                best = (score, c, scale)
    score, c, scale = best
    logger.info(f"✓ SVM grid search: C={c:g}, gamma x{scale:g} (CV {score:.4f})")
    return c, scale, score
