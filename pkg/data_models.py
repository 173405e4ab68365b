#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Data Models for the SHDL toolkit
Typed configuration, datasets and the reports emitted by training and evaluation
"""

import hashlib
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# k_L1[j] reported for CIFAR-10, j = 1..5
DEFAULT_LOG_PARAMS: Dict[int, float] = {1: 1.1, 2: 3.8, 3: 3.8, 4: 7.0, 5: 6.8}

CIFAR10_CLASSES: List[str] = [
    'airplane', 'automobile', 'bird', 'cat', 'deer',
    'dog', 'frog', 'horse', 'ship', 'truck'
]


# === Configuration ===

class ScatterConfig(BaseModel):
    """
    Hand-crafted front-end settings
    Resolution i uses resolution_factors[i] and scales[i] (R1 = 2x, R2 = 1.5x)
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    filter_family: str = Field('default', description="DTCWT filter family identifier")
    resolution_factors: List[float] = Field(default_factory=lambda: [2.0, 1.5])
    scales: List[int] = Field(default_factory=lambda: [5, 4], description="J per resolution")
    log_params_l1: Dict[int, float] = Field(default_factory=lambda: dict(DEFAULT_LOG_PARAMS))
    log_params_l2: Dict[int, float] = Field(default_factory=lambda: dict(DEFAULT_LOG_PARAMS))
    second_layer_rule: Literal['coarser', 'adjacent'] = 'coarser'
    pooling_scale: Optional[int] = Field(None, description="Pooling window; None means 2^J")
    select_k: bool = Field(True, description="Re-estimate k values from training data")
    k_grid_min: float = 0.01
    k_grid_max: float = 20.0
    k_grid_size: int = 50
    k_sample_images: int = 200

    @field_validator('resolution_factors')
    @classmethod
    def check_factors(cls, v):
        if not v or any(f <= 1.0 for f in v):
            raise ValueError("resolution factors must all be > 1")
        return v

    @field_validator('scales')
    @classmethod
    def check_scales(cls, v):
        if any(j < 2 for j in v):
            raise ValueError("every resolution needs J >= 2 so that second-layer paths exist")
        return v

    @field_validator('log_params_l1', 'log_params_l2')
    @classmethod
    def check_log_params(cls, v):
        if any(k <= 0 for k in v.values()):
            raise ValueError("log parameters must be strictly positive")
        return v

    @model_validator(mode='after')
    def check_lengths(self):
        if len(self.resolution_factors) != len(self.scales):
            raise ValueError("resolution_factors and scales must have the same length")
        if self.pooling_scale is not None and self.pooling_scale < 1:
            raise ValueError("pooling_scale must be >= 1")
        if self.k_grid_min <= 0 or self.k_grid_max <= self.k_grid_min or self.k_grid_size < 1:
            raise ValueError("k grid must satisfy 0 < min < max with at least one candidate")
        return self

    @property
    def resolution_names(self) -> List[str]:
        return [f"R{i + 1}" for i in range(len(self.resolution_factors))]

    def pooling_for(self, index: int) -> int:
        return self.pooling_scale or 2 ** self.scales[index]

    def k_grid(self) -> np.ndarray:
        return np.geomspace(self.k_grid_min, self.k_grid_max, self.k_grid_size)


class PcaConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    filter_sizes: List[int] = Field(default_factory=lambda: [5], description="s for L3 and L4")
    k_l3: int = 100
    k_l4: int = 200
    candidate_step: int = 10
    log_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 7.0, 10.0])
    max_patches_per_image: int = 500
    patch_stride: int = 1
    feature_pool: int = 4
    cv_samples: int = Field(0, description="Stratified cap on CV samples; 0 uses all")

    @field_validator('filter_sizes')
    @classmethod
    def check_sizes(cls, v):
        if not v or any(s < 1 or s % 2 == 0 for s in v):
            raise ValueError("filter sizes must be odd and positive")
        return v

    @field_validator('log_grid')
    @classmethod
    def check_grid(cls, v):
        if not v or any(k <= 0 for k in v):
            raise ValueError("log grid must be non-empty and strictly positive")
        return v

    @model_validator(mode='after')
    def check_counts(self):
        if self.k_l3 < 1 or self.k_l4 < 1 or self.candidate_step < 1:
            raise ValueError("filter counts and candidate step must be >= 1")
        if self.patch_stride < 1 or self.feature_pool < 1:
            raise ValueError("patch stride and feature pool must be >= 1")
        return self


class OlsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    budget_per_class: int = 64
    err_floor: float = 1e-8


class SvmConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    c: float = 10.0
    gamma: Optional[float] = Field(None, description="None means 1 / (dim * feature variance)")
    tol: float = Field(1e-3, description="KKT tolerance checked after training")
    max_iter: int = 1_000_000
    cache_mb: float = 200.0
    gram_max_samples: int = 6000
    grid_search: bool = False
    c_grid: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0])
    gamma_grid: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0],
                                    description="Multipliers of the default gamma")

    @model_validator(mode='after')
    def check_positive(self):
        if self.c <= 0 or (self.gamma is not None and self.gamma <= 0):
            raise ValueError("C and gamma must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        return self


class CvConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    folds: int = 5
    stratified: bool = True


class DataConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    cifar_dir: Optional[str] = None
    image_dir: Optional[str] = None
    target_size: int = 128
    exclude_classes: List[str] = Field(default_factory=lambda: ['BACKGROUND_Google'])
    train_per_class: Optional[int] = Field(None, description="Balanced subsample of the training set")
    val_per_class: int = 10


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    sizes: List[int] = Field(default_factory=lambda: [500, 1000, 2000])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator('sizes')
    @classmethod
    def check_ascending(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("sweep sizes must be non-empty and strictly ascending")
        return v


class PipelineConfig(BaseModel):
    """
    Complete run configuration; the seed has no default
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int
    threads: int = 1
    ablation: bool = Field(False, description="Report 5-CV accuracy of HC, HC+L3, HC+L3+L4 after training")
    scatter: ScatterConfig = Field(default_factory=ScatterConfig)
    pca: PcaConfig = Field(default_factory=PcaConfig)
    ols: OlsConfig = Field(default_factory=OlsConfig)
    svm: SvmConfig = Field(default_factory=SvmConfig)
    cv: CvConfig = Field(default_factory=CvConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


# === Datasets ===

class Dataset(BaseModel):
    """
    Images stacked as N x H x W x C float32 in [0, 1] with integer labels
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    split: Literal['train', 'val', 'test'] = 'train'
    source: str = ''

    @model_validator(mode='after')
    def check_consistency(self):
        if self.images.ndim != 4:
            raise ValueError("images must be stacked as N x H x W x C")
        if len(self.labels) != len(self.images):
            raise ValueError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images contain NaN or infinite pixels")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> Dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(n) for name, n in zip(self.class_names, counts)}

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[indices],
            labels=self.labels[indices],
            class_names=list(self.class_names),
            split=split or self.split,
            source=self.source
        )

    def content_hash(self) -> str:
        """SHA-256 over pixels, labels and class names"""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.images, dtype='<f4').tobytes())
        digest.update(np.ascontiguousarray(self.labels, dtype='<i8').tobytes())
        digest.update('\n'.join(self.class_names).encode('utf-8'))
        return digest.hexdigest()


# === Reports ===

class CvCurvePoint(BaseModel):
    candidate: float
    fold_accuracies: List[float]
    mean: float


class CvCurve(BaseModel):
    """Cross-validation scan over filter counts or log parameters for one layer"""
    stream: str
    layer: Literal['L3', 'L4']
    filter_size: int
    parameter: Literal['filter_count', 'log_param']
    points: List[CvCurvePoint]
    chosen: float

    def accuracy_at(self, candidate: float) -> float:
        for point in self.points:
            if point.candidate == candidate:
                return point.mean
        raise KeyError(candidate)


class DimensionRecord(BaseModel):
    stage: str
    input_dim: int
    output_dim: int


class TrainingManifest(BaseModel):
    dataset_hash: str
    seed: int
    n_train: int
    class_names: List[str]
    image_shape: List[int] = Field(default_factory=list)
    dimension_chain: List[DimensionRecord] = Field(default_factory=list)
    cv_curves: List[CvCurve] = Field(default_factory=list)
    deviation_flags: List[str] = Field(default_factory=list)
    svm_params: Dict[str, float] = Field(default_factory=dict)
    ablation: Dict[str, float] = Field(default_factory=dict)
    ablation_monotonic: Optional[bool] = None
    # first-layer scale -> [raw |mean - median|, same after the parametric log]
    symmetry_gaps: Dict[int, List[float]] = Field(default_factory=dict)

    def chain_is_consistent(self) -> bool:
        """Every stage consumes exactly what the previous stage produced"""
        return all(a.output_dim == b.input_dim
                   for a, b in zip(self.dimension_chain, self.dimension_chain[1:]))


class StageTiming(BaseModel):
    stage: str
    seconds: float


class MetricsReport(BaseModel):
    n_samples: int
    accuracy: float
    per_class_accuracy: Dict[str, float]
    mean_per_class_accuracy: float
    confusion: List[List[int]]
    class_names: List[str]
    unseen_classes: List[str] = Field(default_factory=list)


class SweepRow(BaseModel):
    size: int
    seed: int
    accuracy: Optional[float] = None
    mean_per_class_accuracy: Optional[float] = None
    status: str = 'ok'


class SweepReport(BaseModel):
    rows: List[SweepRow]
    mean_accuracy_by_size: Dict[int, float]
    monotonic: bool

    def failed_rows(self) -> List[SweepRow]:
        return [row for row in self.rows if row.status != 'ok']
