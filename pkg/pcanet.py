#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Learned PCA layers
Patch PCA filter banks stacked on the scattering streams, with filter-count and
log-parameter selection by SVM cross-validation
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import eigh

from data_models import CvCurve, CvCurvePoint, CvConfig, PcaConfig, SvmConfig
from errors import DegenerateInputError, DimensionError, ParameterError, ProtocolError
from scatter import pool_to_grid
from svm import CrossValidator, cross_validate
from workers import parallel_map

logger = logging.getLogger(__name__)

RANK_EPS = 1e-10
# Approximate float64 element budget of one convolution chunk
CONV_CHUNK_ELEMENTS = 20_000_000


class PatchMatrix(BaseModel):
    """
    Mean-removed patch vectors as columns; rows index (dy, dx, channel) in C order
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    patch_size: Tuple[int, int]
    channels: int

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def count(self) -> int:
        return int(self.data.shape[1])


class PcaLayerModel(BaseModel):
    """
    Filters stored as s x s x P x K; eigenvalues descending
    optimal_count and log_param are filled in by the CV selection steps
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    filters: np.ndarray
    eigenvalues: np.ndarray
    optimal_count: int
    log_param: Optional[float] = None
    rank_deficient: bool = False

    @model_validator(mode='after')
    def check_shapes(self):
        if self.filters.ndim != 4:
            raise ValueError("filters must be s x s x P x K")
        if len(self.eigenvalues) != self.filters.shape[3]:
            raise ValueError("one eigenvalue per filter required")
        if not 1 <= self.optimal_count <= self.filters.shape[3]:
            raise ValueError(f"optimal_count must lie in [1, {self.filters.shape[3]}]")
        if np.any(self.eigenvalues < 0):
            raise ValueError("eigenvalues must be non-negative")
        return self

    @property
    def size(self) -> int:
        return int(self.filters.shape[0])

    @property
    def channels(self) -> int:
        return int(self.filters.shape[2])

    @property
    def capacity(self) -> int:
        return int(self.filters.shape[3])

    def matrix(self, count: Optional[int] = None) -> np.ndarray:
        """Filters as columns of a (s*s*P) x count matrix"""
        count = self.capacity if count is None else count
        return self.filters.reshape(-1, self.capacity)[:, :count]

    def orthonormality_error(self) -> float:
        W = np.asarray(self.matrix(), dtype=np.float64)
        return float(np.max(np.abs(W.T @ W - np.eye(W.shape[1]))))

    def as_float32(self) -> 'PcaLayerModel':
        return self.model_copy(update={
            'filters': self.filters.astype(np.float32),
            'eigenvalues': self.eigenvalues.astype(np.float32)
        })


class PcaStack(BaseModel):
    """L3 and L4 models per scattering stream for one filter size"""
    filter_size: int
    layer3: Dict[str, PcaLayerModel]
    layer4: Dict[str, PcaLayerModel]
    curves: List[CvCurve] = Field(default_factory=list)

    @property
    def streams(self) -> List[str]:
        return list(self.layer3)

    def output_dim(self, stream_shapes: Dict[str, Tuple[int, int, int]], pool: int) -> int:
        """Feature count given (planes, gh, gw) per stream"""
        total = 0
        for name, (planes, _, _) in stream_shapes.items():
            total += planes * pool * pool * (self.layer3[name].optimal_count + self.layer4[name].optimal_count)
        return total

    def as_float32(self) -> 'PcaStack':
        return self.model_copy(update={
            'layer3': {k: m.as_float32() for k, m in self.layer3.items()},
            'layer4': {k: m.as_float32() for k, m in self.layer4.items()},
        })


# === Patches and filters ===

def extract_patches(maps: np.ndarray, patch_size: Tuple[int, int], stride: int = 1,
                    max_per_image: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> PatchMatrix:
    """
    Collect every (strided) z1 x z2 patch of each map, vectorize it channel-jointly
    and remove the patch mean

    Args:
        maps: M x H x W x P stack (a single H x W x P map or H x W grid is accepted)
        patch_size: (z1, z2)
        stride: Step between patch origins
        max_per_image: Random cap on patches per map; requires rng

    Returns:
        PatchMatrix with z1*z2*P rows, columns ordered map-major then row-major
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None, :, :, None]
    elif maps.ndim == 3:
        maps = maps[None]
    z1, z2 = patch_size
    if z1 < 1 or z2 < 1 or stride < 1:
        raise ParameterError(f"invalid patch size {patch_size} or stride {stride}")
    _, h, w, channels = maps.shape
    if h < z1 or w < z2:
        raise DimensionError(f"map {h}x{w} is smaller than patch {z1}x{z2}")

    columns = []
    for fmap in maps:
        windows = sliding_window_view(fmap, (z1, z2), axis=(0, 1))[::stride, ::stride]
        vectors = windows.transpose(0, 1, 3, 4, 2).reshape(-1, z1 * z2 * channels)
        if max_per_image and len(vectors) > max_per_image:
            if rng is None:
                raise ParameterError("patch subsampling needs a random generator")
            vectors = vectors[np.sort(rng.choice(len(vectors), max_per_image, replace=False))]
        columns.append(vectors - vectors.mean(axis=1, keepdims=True))

    return PatchMatrix(data=np.concatenate(columns).T, patch_size=(z1, z2), channels=channels)


def learn_pca_filters(patches: PatchMatrix, count: int) -> PcaLayerModel:
    """
    Leading eigenvectors of X X^T as filters

    Each eigenvector is signed so that its largest-magnitude entry is positive.
    """
    rows = patches.rows
    if count < 1 or count > rows:
        raise DimensionError(f"cannot learn {count} filters from {rows}-dimensional patches")
    if patches.count < count:
        raise DimensionError(f"{patches.count} patches cannot span {count} filters")
    X = patches.data
    if not np.any(X):
        raise DegenerateInputError("all patches are zero; PCA directions are undefined")

    cov = X @ X.T
    values, vectors = eigh(cov, subset_by_index=[rows - count, rows - 1])
    values = np.clip(values[::-1], 0.0, None)
    vectors = vectors[:, ::-1]

    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(count)])
    vectors = vectors * np.where(signs == 0, 1.0, signs)

    rank_deficient = bool(values[-1] <= RANK_EPS * max(values[0], np.finfo(float).tiny))
    if rank_deficient:
        logger.warning(f"Patch covariance is rank deficient within the top {count} directions")

    z1, z2 = patches.patch_size
    return PcaLayerModel(
        filters=vectors.reshape(z1, z2, patches.channels, count),
        eigenvalues=values,
        optimal_count=count,
        rank_deficient=rank_deficient
    )


def convolve_bank(maps: np.ndarray, model: PcaLayerModel, count: Optional[int] = None) -> np.ndarray:
    """
    Zero-padded 'same' correlation of multichannel maps with the first count filters

    Args:
        maps: ... x H x W x P
    Returns:
        ... x H x W x count
    """
    maps = np.asarray(maps, dtype=np.float64)
    count = model.optimal_count if count is None else count
    if count > model.capacity:
        raise DimensionError(f"requested {count} filters from a bank of {model.capacity}")
    if maps.shape[-1] != model.channels:
        raise DimensionError(f"filters expect {model.channels} channels, maps have {maps.shape[-1]}")
    s = model.size
    half = s // 2
    lead = maps.shape[:-3]
    h, w, p = maps.shape[-3:]
    flat = maps.reshape((-1, h, w, p))
    padded = np.pad(flat, ((0, 0), (half, half), (half, half), (0, 0)))
    W = np.asarray(model.matrix(count), dtype=np.float64)

    step = max(1, CONV_CHUNK_ELEMENTS // max(1, h * w * s * s * p))
    out = np.empty((len(flat), h, w, count))
    for start in range(0, len(flat), step):
        windows = sliding_window_view(padded[start:start + step], (s, s), axis=(1, 2))
        vectors = windows.transpose(0, 1, 2, 4, 5, 3).reshape(-1, s * s * p)
        out[start:start + step] = (vectors @ W).reshape(-1, h, w, count)
    return out.reshape(lead + (h, w, count))


def signed_log(values: np.ndarray, k: float) -> np.ndarray:
    """sign(y) * log(|y| + k) for signed PCA responses"""
    if k <= 0:
        raise ParameterError(f"log parameter must be > 0, got {k}")
    return np.sign(values) * np.log(np.abs(values) + k)


def pool_features(outputs: np.ndarray, pool: int) -> np.ndarray:
    """
    Average-pool N x planes x H x W x K responses to pool x pool per channel
    Returns N x (planes * K * pool * pool), ordered plane, channel, y, x
    """
    moved = np.moveaxis(outputs, -1, 2)
    pooled = pool_to_grid(moved, (pool, pool))
    return pooled.reshape(len(outputs), -1)


# === Cross-validated selection ===

def filter_count_candidates(capacity: int, step: int) -> List[int]:
    candidates = list(range(step, capacity + 1, step))
    if not candidates or candidates[-1] != capacity:
        candidates.append(capacity)
    return candidates


def _scan(candidates: Sequence[float], features: Callable[[float], np.ndarray], labels: np.ndarray,
          svm_config: SvmConfig, cv: CrossValidator, threads: Optional[int]) -> Tuple[float, List[CvCurvePoint]]:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ProtocolError("parameter selection needs at least 2 classes")
    points: List[CvCurvePoint] = []
    best_value, best_score = None, -np.inf
    for candidate in candidates:
        result = cross_validate(features(candidate), labels, svm_config, cv, threads)
        points.append(CvCurvePoint(candidate=float(candidate), fold_accuracies=result.fold_accuracies,
                                   mean=result.mean))
        if result.mean > best_score:
            best_value, best_score = candidate, result.mean
    return best_value, points


def optimize_filter_count(outputs: np.ndarray, labels: np.ndarray, candidates: Sequence[int],
                          svm_config: SvmConfig, cv: CrossValidator, pool: int = 4,
                          log_param: Optional[float] = None,
                          threads: Optional[int] = None) -> Tuple[int, List[CvCurvePoint]]:
    """
    Pick the number of leading filters with the best CV accuracy; ties keep the smaller count

    outputs holds the responses of all filters (N x planes x H x W x K); each
    candidate keeps the first channels.
    """
    candidates = sorted(int(c) for c in candidates)
    if not candidates or candidates[0] < 1 or candidates[-1] > outputs.shape[-1]:
        raise DimensionError(f"filter-count candidates must lie in [1, {outputs.shape[-1]}]")

    def features(count: float) -> np.ndarray:
        sliced = outputs[..., :int(count)]
        return pool_features(sliced if log_param is None else signed_log(sliced, log_param), pool)

    best, points = _scan(candidates, features, labels, svm_config, cv, threads)
    return int(best), points


def optimize_pca_log_param(outputs: np.ndarray, labels: np.ndarray, grid: Sequence[float],
                           svm_config: SvmConfig, cv: CrossValidator, pool: int = 4,
                           threads: Optional[int] = None) -> Tuple[float, List[CvCurvePoint]]:
    """Pick the log parameter with the best CV accuracy; ties keep the smaller value"""
    grid = sorted(float(k) for k in grid)
    if not grid or grid[0] <= 0:
        raise ParameterError("log grid must be non-empty and positive")
    best, points = _scan(grid, lambda k: pool_features(signed_log(outputs, k), pool),
                         labels, svm_config, cv, threads)
    return float(best), points


# === Stack training and inference ===

def _cv_subset(labels: np.ndarray, limit: int, seed: int) -> np.ndarray:
    """Stratified subsample of at most limit indices (all when limit <= 0)"""
    if limit <= 0 or len(labels) <= limit:
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = max(1, limit // len(classes))
    chosen = [rng.permutation(np.flatnonzero(labels == c))[:per_class] for c in classes]
    return np.sort(np.concatenate(chosen))


def _train_layer(maps: np.ndarray, labels: np.ndarray, capacity: int, config: PcaConfig,
                 filter_size: int, stream: str, layer: str, svm_config: SvmConfig,
                 cv: CrossValidator, cv_idx: np.ndarray, rng: np.random.Generator,
                 threads: Optional[int]) -> Tuple[PcaLayerModel, np.ndarray, List[CvCurve]]:
    n, planes, h, w, p = maps.shape
    patches = extract_patches(maps.reshape(n * planes, h, w, p), (filter_size, filter_size),
                              config.patch_stride, config.max_patches_per_image, rng)
    if capacity > patches.rows:
        logger.warning(f"{stream}/{layer}: {capacity} filters requested but patches have "
                       f"{patches.rows} dimensions, using {patches.rows}")
        capacity = patches.rows
    model = learn_pca_filters(patches, capacity)

    outputs = convolve_bank(maps, model, capacity).astype(np.float32)
    cv_outputs = outputs[cv_idx]
    candidates = filter_count_candidates(capacity, config.candidate_step)
    count, count_points = optimize_filter_count(cv_outputs, labels[cv_idx], candidates, svm_config, cv,
                                                config.feature_pool, threads=threads)
    k, k_points = optimize_pca_log_param(cv_outputs[..., :count], labels[cv_idx], config.log_grid,
                                         svm_config, cv, config.feature_pool, threads)
    model = model.model_copy(update={'optimal_count': count, 'log_param': k})
    logger.info(f"✓ {stream}/{layer} s={filter_size}: K={count} of {capacity}, k={k:g}")

    curves = [
        CvCurve(stream=stream, layer=layer, filter_size=filter_size, parameter='filter_count',
                points=count_points, chosen=float(count)),
        CvCurve(stream=stream, layer=layer, filter_size=filter_size, parameter='log_param',
                points=k_points, chosen=k),
    ]
    rectified = signed_log(outputs[..., :count].astype(np.float64), k)
    return model, rectified, curves


def train_pcanet_stack(streams: Dict[str, np.ndarray], labels: np.ndarray, config: PcaConfig,
                       filter_size: int, svm_config: SvmConfig, cv_config: CvConfig, seed: int,
                       threads: Optional[int] = None) -> PcaStack:
    """
    Learn L3 on each scattering stream, then L4 on the rectified L3 outputs

    Args:
        streams: name -> N x planes x gh x gw x P scattering maps
        labels: Training labels
        seed: Drives patch subsampling, the CV subset and fold assignment
    """
    labels = np.asarray(labels)
    cv = CrossValidator(folds=cv_config.folds, seed=seed, stratified=cv_config.stratified)
    cv_idx = _cv_subset(labels, config.cv_samples, seed)
    names = list(streams)

    def train_stream(index: int):
        name = names[index]
        rng = np.random.default_rng([seed, filter_size, index])
        l3, rect3, curves3 = _train_layer(streams[name], labels, config.k_l3, config, filter_size,
                                          name, 'L3', svm_config, cv, cv_idx, rng, threads=1)
        l4, _, curves4 = _train_layer(rect3, labels, config.k_l4, config, filter_size,
                                      name, 'L4', svm_config, cv, cv_idx, rng, threads=1)
        return name, l3, l4, curves3 + curves4

    results = parallel_map(train_stream, range(len(names)), threads)
    return PcaStack(
        filter_size=filter_size,
        layer3={name: l3 for name, l3, _, _ in results},
        layer4={name: l4 for name, _, l4, _ in results},
        curves=[curve for *_, curves in results for curve in curves]
    )


def stack_features(stack: PcaStack, streams: Dict[str, np.ndarray], pool: int) -> np.ndarray:
    """
    Pooled L3 and L4 features of new maps through a trained stack
    Per stream: L3 block then L4 block
    """
    blocks = []
    for name in stack.streams:
        l3, l4 = stack.layer3[name], stack.layer4[name]
        rect3 = signed_log(convolve_bank(streams[name], l3, l3.optimal_count), l3.log_param)
        rect4 = signed_log(convolve_bank(rect3, l4, l4.optimal_count), l4.log_param)
        blocks.append(pool_features(rect3, pool))
        blocks.append(pool_features(rect4, pool))
    return np.concatenate(blocks, axis=1)


def stack_descriptors(stack: PcaStack, stream_shapes: Dict[str, Tuple[int, int, int]], pool: int) -> List[str]:
    """Column names matching stack_features"""
    names = []
    for stream in stack.streams:
        planes = stream_shapes[stream][0]
        for layer, model in (('L3', stack.layer3[stream]), ('L4', stack.layer4[stream])):
            names.extend(
                f"PCA/s{stack.filter_size}/{stream}/{layer}/c{c}/f{f}@{y},{x}"
                for c in range(planes) for f in range(model.optimal_count)
                for y in range(pool) for x in range(pool)
            )
    return names
