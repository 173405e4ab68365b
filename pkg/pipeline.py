#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
SHDL pipeline orchestration
Training the full stack, evaluation, training-size sweeps, ablation and feature dumps
"""

import csv
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from data_models import (CvCurve, Dataset, DimensionRecord, MetricsReport, PipelineConfig,
                         StageTiming, SweepReport, SweepRow, TrainingManifest)
from datasets import load_cifar10, load_image_folder, split_per_class, subsample_balanced
from errors import ConfigError, ConsistencyError, DataError, DimensionError, ShdlError
from ols import OlsSelection, normalize_features, ols_select, reduce
from pcanet import PcaStack, stack_descriptors, stack_features, train_pcanet_stack
from scatter import (build_layout, scatter_batch, scatter_stream, select_scatter_log_params, stream_names,
                     symmetry_report)
from svm import (CrossValidator, FoldPreparer, SvmModel, default_gamma, fold_accuracy, grid_search, predict_gsvm,
                 train_gsvm)
from wavelet import build_filter_bank
from workers import parallel_map

logger = logging.getLogger(__name__)

MODEL_VERSION = 1
# Images pushed through the feature extractor at once during inference
INFERENCE_CHUNK = 250
# Largest |W^T W - I| accepted for a learned PCA layer before it is stored as float32
ORTHONORMAL_TOL = 1e-8


class PipelineModel(BaseModel):
    """
    Trained composite; arrays are float32 once training finishes
    feature_ids index the raw concatenated vector (scattering, then PCA stacks)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    version: int = MODEL_VERSION
    config: PipelineConfig
    pca_stacks: List[PcaStack]
    feature_dim: int
    feature_ids: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    selection: OlsSelection
    svm: SvmModel
    manifest: TrainingManifest

    @property
    def class_names(self) -> List[str]:
        return self.manifest.class_names


@contextmanager
def stage(name: str, timings: Optional[List[StageTiming]] = None) -> Iterator[None]:
    """Time a pipeline stage and tag errors escaping it with the stage name"""
    start = time.perf_counter()
    logger.debug(f"▶ {name}", extra={'stage': name})
    try:
        yield
    except ShdlError as e:
        if e.stage is None:
            e.stage = name
        logger.error(f"❌ {e}", extra={'stage': name})
        raise
    finally:
        elapsed = time.perf_counter() - start
        if timings is not None:
            timings.append(StageTiming(stage=name, seconds=round(elapsed, 3)))
    logger.info(f"✓ {name} done in {elapsed:.1f}s", extra={'stage': name})


# === Feature extraction ===

def _stream_maps(flat: np.ndarray, config: PipelineConfig, image_shape: Tuple[int, ...]) -> Dict[str, np.ndarray]:
    layout = build_layout(image_shape, config.scatter)
    return {name: scatter_stream(flat, layout, name) for name in stream_names(config.scatter)}


def raw_features(images: np.ndarray, config: PipelineConfig, stacks: Sequence[PcaStack],
                 threads: Optional[int] = None) -> np.ndarray:
    """Concatenated scattering and PCA features (N x D float32) for a batch of images"""
    bank = build_filter_bank(config.scatter.filter_family)
    scattering = scatter_batch(images, config.scatter, bank, threads)
    if not stacks:
        return scattering
    streams = _stream_maps(scattering, config, images.shape[1:])
    blocks = [scattering]
    blocks.extend(stack_features(stack, streams, config.pca.feature_pool).astype(np.float32) for stack in stacks)
    return np.concatenate(blocks, axis=1)


def feature_descriptors(config: PipelineConfig, image_shape: Tuple[int, ...],
                        stacks: Sequence[PcaStack]) -> List[str]:
    layout = build_layout(image_shape, config.scatter)
    names = layout.descriptors()
    shapes = {name: _stream_shape(layout, name) for name in stream_names(config.scatter)}
    for stack in stacks:
        names.extend(stack_descriptors(stack, shapes, config.pca.feature_pool))
    return names


def _stream_shape(layout, name: str) -> Tuple[int, int, int]:
    shape = layout.block(name).shape
    return shape[0], shape[-2], shape[-1]


def _feature_groups(config: PipelineConfig, image_shape: Tuple[int, ...],
                    stacks: Sequence[PcaStack]) -> Dict[str, np.ndarray]:
    """Column ids of the hand-crafted block and of every L3 and L4 block"""
    layout = build_layout(image_shape, config.scatter)
    pool = config.pca.feature_pool
    offset = layout.total
    l3, l4 = [], []
    for stack in stacks:
        for name in stack.streams:
            planes = _stream_shape(layout, name)[0]
            for target, model in ((l3, stack.layer3[name]), (l4, stack.layer4[name])):
                width = planes * model.optimal_count * pool * pool
                target.append(np.arange(offset, offset + width))
                offset += width
    empty = np.empty(0, dtype=np.int64)
    return {
        'HC': np.arange(layout.total),
        'L3': np.concatenate(l3) if l3 else empty,
        'L4': np.concatenate(l4) if l4 else empty,
    }


def transform_features(model: PipelineModel, images: np.ndarray,
                       threads: Optional[int] = None) -> np.ndarray:
    """Normalized selected features for new images, computed in chunks"""
    rows = []
    for start in range(0, len(images), INFERENCE_CHUNK):
        raw = raw_features(images[start:start + INFERENCE_CHUNK], model.config, model.pca_stacks, threads)
        if raw.shape[1] != model.feature_dim:
            raise DimensionError(f"images yield {raw.shape[1]} features, model expects {model.feature_dim}")
        selected = raw[:, model.feature_ids].astype(np.float64)
        rows.append((selected - model.feature_means) / model.feature_stds)
    return np.concatenate(rows) if rows else np.empty((0, len(model.feature_ids)))


# === Training ===

def _deviation_flags(config: PipelineConfig) -> List[str]:
    flags = ['pca-outputs-signed-log']
    if config.scatter.pooling_scale is not None:
        flags.append(f"pooling-scale={config.scatter.pooling_scale}")
    if config.scatter.select_k:
        flags.append('k-selected-per-image-and-averaged')
    if config.pca.cv_samples > 0:
        flags.append(f"pca-cv-subsample={config.pca.cv_samples}")
    if config.pca.max_patches_per_image > 0:
        flags.append(f"pca-patches-per-map<={config.pca.max_patches_per_image}")
    return flags


def train_pipeline(config: PipelineConfig, train_set: Dataset, threads: Optional[int] = None,
                   timings: Optional[List[StageTiming]] = None) -> PipelineModel:
    """
    Train scattering k values, PCA stacks, OLS selection and the SVM on train_set

    Stage timings are appended to timings when given; they are not part of the model.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty", stage='train')
    timings = timings if timings is not None else []
    labels = train_set.labels
    image_shape = train_set.images.shape[1:]
    cv = CrossValidator(folds=config.cv.folds, seed=config.seed, stratified=config.cv.stratified)
    chain: List[DimensionRecord] = []
    logger.info(f"🔧 Training on {len(train_set)} images, {train_set.num_classes} classes, seed {config.seed}",
                extra={'seed': config.seed})

    with stage('scatter-k', timings):
        bank = build_filter_bank(config.scatter.filter_family)
        if config.scatter.select_k:
            config = config.model_copy(update={
                'scatter': select_scatter_log_params(train_set.images, config.scatter, bank, threads)
            })
        symmetry = symmetry_report(train_set.images, config.scatter, bank, limit=config.scatter.k_sample_images)
        for j, (raw_gap, log_gap) in symmetry.items():
            if log_gap > raw_gap:
                logger.warning(f"Log transform widens the mean/median gap at scale {j}: "
                               f"{log_gap:.4g} > {raw_gap:.4g}", extra={'stage': 'scatter-k'})

    with stage('scatter', timings):
        scattering = scatter_batch(train_set.images, config.scatter, bank, threads)
        chain.append(DimensionRecord(stage='scatter', input_dim=int(np.prod(image_shape)),
                                     output_dim=scattering.shape[1]))

    with stage('pca', timings):
        streams = _stream_maps(scattering, config, image_shape)
        stacks = [
            train_pcanet_stack(streams, labels, config.pca, size, config.svm, config.cv, config.seed, threads)
            for size in config.pca.filter_sizes
        ]
        _check_orthonormal(stacks)
        features = np.concatenate(
            [scattering] + [stack_features(s, streams, config.pca.feature_pool).astype(np.float32) for s in stacks],
            axis=1
        )
        del streams, scattering
        chain.append(DimensionRecord(stage='concatenate', input_dim=chain[-1].output_dim,
                                     output_dim=features.shape[1]))

    ablation: Dict[str, float] = {}
    if config.ablation:
        with stage('ablation', timings):
            ablation = ablation_report(features, _feature_groups(config, image_shape, stacks), labels,
                                       config, threads)

    svm_config = config.svm
    gamma_scale = 1.0
    if svm_config.grid_search:
        with stage('svm-grid', timings):
            c, gamma_scale, _ = grid_search(features, labels, svm_config, cv, threads,
                                            prepare=backend_fold(features, labels, config))
            svm_config = svm_config.model_copy(update={'c': c})

    with stage('normalize', timings):
        feature_dim = features.shape[1]
        table = normalize_features(features)
        del features
        chain.append(DimensionRecord(stage='normalize', input_dim=feature_dim, output_dim=table.shape[1]))

    with stage('ols', timings):
        selection = ols_select(table, labels, config.ols.budget_per_class, config.ols.err_floor, threads)
        reduced = reduce(table, selection)
        del table
        chain.append(DimensionRecord(stage='ols', input_dim=chain[-1].output_dim, output_dim=reduced.shape[1]))

    with stage('svm', timings):
        gamma = svm_config.gamma if svm_config.gamma is not None else default_gamma(reduced.data)
        gamma *= gamma_scale
        svm = train_gsvm(reduced.data, labels, svm_config.c, gamma, svm_config.tol, svm_config.max_iter,
                         svm_config.cache_mb, svm_config.gram_max_samples, threads)
        chain.append(DimensionRecord(stage='svm', input_dim=reduced.shape[1], output_dim=len(svm.classes)))

    manifest = TrainingManifest(
        dataset_hash=train_set.content_hash(),
        seed=config.seed,
        n_train=len(train_set),
        class_names=list(train_set.class_names),
        image_shape=[int(d) for d in image_shape],
        dimension_chain=chain,
        cv_curves=[curve for s in stacks for curve in s.curves],
        deviation_flags=_deviation_flags(config),
        svm_params={'c': svm.c, 'gamma': svm.gamma},
        ablation=ablation,
        ablation_monotonic=_is_monotonic(list(ablation.values())) if ablation else None,
        symmetry_gaps={j: [raw_gap, log_gap] for j, (raw_gap, log_gap) in symmetry.items()}
    )
    if not manifest.chain_is_consistent():
        logger.warning("Dimension chain is inconsistent")

    return PipelineModel(
        config=config,
        pca_stacks=[s.as_float32() for s in stacks],
        feature_dim=feature_dim,
        feature_ids=reduced.column_ids.astype(np.int64),
        feature_means=reduced.means.astype(np.float32),
        feature_stds=reduced.stds.astype(np.float32),
        selection=selection,
        svm=svm.as_float32(),
        manifest=manifest
    )


def _is_monotonic(values: Sequence[float]) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


def _check_orthonormal(stacks: Sequence[PcaStack]) -> None:
    for stack in stacks:
        for name in stack.streams:
            for layer_name, layer in (('L3', stack.layer3[name]), ('L4', stack.layer4[name])):
                error = layer.orthonormality_error()
                if error > ORTHONORMAL_TOL:
                    raise ConsistencyError(f"{layer_name} filters of {name} (s={stack.filter_size}) are not "
                                           f"orthonormal: max |W^T W - I| = {error:.2e}")


# === Ablation ===

def backend_fold(features: np.ndarray, labels: np.ndarray, config: PipelineConfig) -> FoldPreparer:
    """
    Fold preparation for the OLS + SVM back-end: normalization and OLS selection are
    learned on the training fold, then applied to the validation fold
    """
    labels = np.asarray(labels)

    def prepare(train_idx: np.ndarray, val_idx: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        table = normalize_features(features[train_idx])
        selection = ols_select(table, labels[train_idx], config.ols.budget_per_class, config.ols.err_floor,
                               threads=1)
        reduced = reduce(table, selection)
        return reduced.data, reduced.normalize_rows(features[val_idx][:, reduced.column_ids])

    return prepare


def ablation_report(features: np.ndarray, groups: Dict[str, np.ndarray], labels: np.ndarray,
                    config: PipelineConfig, threads: Optional[int] = None) -> Dict[str, float]:
    """
    5-CV accuracy of the OLS + SVM back-end on HC, HC+L3 and HC+L3+L4 features
    Monotonic growth is reported, never enforced.
    """
    cv = CrossValidator(folds=config.cv.folds, seed=config.seed, stratified=config.cv.stratified)
    folds = cv.split(labels)
    combos = {
        'HC': groups['HC'],
        'HC+L3': np.concatenate([groups['HC'], groups['L3']]),
        'HC+L3+L4': np.concatenate([groups['HC'], groups['L3'], groups['L4']]),
    }
    report = {}
    for name, columns in combos.items():
        prepare = backend_fold(features[:, np.sort(columns)], labels, config)
        scores = parallel_map(
            lambda split: fold_accuracy(*prepare(split[0], split[1]), labels[split[0]], labels[split[1]],
                                        config.svm),
            folds, threads
        )
        report[name] = float(np.mean(scores))
        logger.info(f"Ablation {name}: 5-CV accuracy {report[name]:.4f}")
    if not _is_monotonic(list(report.values())):
        logger.warning("Ablation accuracy does not grow with every added layer")
    return report


# === Evaluation ===

def evaluate(model: PipelineModel, test_set: Dataset, threads: Optional[int] = None) -> MetricsReport:
    """Overall, per-class and mean per-class accuracy plus the confusion matrix"""
    trained_shape = tuple(model.manifest.image_shape)
    if tuple(test_set.images.shape[1:]) != trained_shape:
        raise DimensionError(f"test images {test_set.images.shape[1:]} differ from training images {trained_shape}",
                             stage='evaluate')
    with stage('evaluate'):
        features = transform_features(model, test_set.images, threads)
        predicted, _ = predict_gsvm(model.svm, features)

    names = list(test_set.class_names)
    n_classes = max(len(names), len(model.class_names))
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (test_set.labels, predicted), 1)

    present = [c for c in range(len(names)) if np.any(test_set.labels == c)]
    per_class = {
        names[c]: float(np.mean(predicted[test_set.labels == c] == c)) for c in present
    }
    unseen = [names[c] for c in present if c not in model.svm.classes]
    if unseen:
        logger.warning(f"Classes absent from training are always misclassified: {', '.join(unseen)}")

    report = MetricsReport(
        n_samples=len(test_set),
        accuracy=float(np.mean(predicted == test_set.labels)) if len(test_set) else 0.0,
        per_class_accuracy=per_class,
        mean_per_class_accuracy=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        confusion=confusion.tolist(),
        class_names=names,
        unseen_classes=unseen
    )
    logger.info(f"✓ Accuracy {report.accuracy:.4f}, mean per class {report.mean_per_class_accuracy:.4f} "
                f"on {report.n_samples} images")
    return report


def write_metrics(report: MetricsReport, prefix: Union[str, Path]) -> Tuple[Path, Path]:
    """<prefix>.json (full report) and <prefix>.csv (class, n, accuracy)"""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    json_path = prefix.with_suffix('.json')
    csv_path = prefix.with_suffix('.csv')
    json_path.write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n", encoding='utf-8')

    with open(csv_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['class', 'n', 'accuracy'])
        for index, name in enumerate(report.class_names):
            if name in report.per_class_accuracy:
                n = int(sum(report.confusion[index]))
                writer.writerow([name, n, f"{report.per_class_accuracy[name]:.6f}"])
        writer.writerow(['overall', report.n_samples, f"{report.accuracy:.6f}"])
        writer.writerow(['mean_per_class', report.n_samples, f"{report.mean_per_class_accuracy:.6f}"])
    return json_path, csv_path


# === Training-size sweep ===

def sweep_sizes(config: PipelineConfig, train_set: Dataset, test_set: Dataset,
                sizes: Optional[Sequence[int]] = None, seeds: Optional[Sequence[int]] = None,
                threads: Optional[int] = None) -> SweepReport:
    """
    Train and evaluate one pipeline per (size, seed) on balanced subsamples

    size is the total training-set size; each class gets size // num_classes images.
    A failing cell is recorded with its stage and the sweep continues.
    """
    sizes = list(sizes or config.sweep.sizes)
    seeds = list(seeds or config.sweep.seeds)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ConfigError(f"sweep sizes must be strictly ascending: {sizes}")
    if sizes and sizes[-1] > len(train_set):
        raise ConfigError(f"sweep size {sizes[-1]} exceeds the {len(train_set)} training images")

    rows: List[SweepRow] = []
    for size in sizes:
        for seed in seeds:
            extra = {'size': size, 'seed': seed}
            logger.info(f"🔧 Sweep cell size={size} seed={seed}", extra=extra)
            try:
                subset = subsample_balanced(train_set, size // train_set.num_classes, seed)
                model = train_pipeline(config.model_copy(update={'seed': seed}), subset, threads)
                metrics = evaluate(model, test_set, threads)
                rows.append(SweepRow(size=size, seed=seed, accuracy=metrics.accuracy,
                                     mean_per_class_accuracy=metrics.mean_per_class_accuracy))
            except Exception as e:
                stage_name = getattr(e, 'stage', None) or type(e).__name__
                logger.error(f"❌ Sweep cell size={size} seed={seed} failed: {e}", extra=extra)
                rows.append(SweepRow(size=size, seed=seed, status=f"failed:{stage_name}"))

    means = {}
    for size in sizes:
        scores = [r.accuracy for r in rows if r.size == size and r.status == 'ok']
        if scores:
            means[size] = float(np.mean(scores))
    monotonic = _is_monotonic([means[s] for s in sizes if s in means])
    if not monotonic:
        logger.warning("Mean accuracy does not grow with training-set size")
    return SweepReport(rows=rows, mean_accuracy_by_size=means, monotonic=monotonic)


def write_sweep_csv(report: SweepReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['size', 'seed', 'accuracy', 'mean_per_class_accuracy', 'status'])
        for row in report.rows:
            writer.writerow([row.size, row.seed,
                             '' if row.accuracy is None else f"{row.accuracy:.6f}",
                             '' if row.mean_per_class_accuracy is None else f"{row.mean_per_class_accuracy:.6f}",
                             row.status])
        for size, mean in report.mean_accuracy_by_size.items():
            writer.writerow([size, 'mean', f"{mean:.6f}", '', 'ok'])
    return path


# === Curves, timings and feature dumps ===

def write_cv_curves(curves: Sequence[CvCurve], directory: Union[str, Path]) -> List[Path]:
    """One CSV per curve: candidate, fold1..foldK, mean"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for curve in curves:
        name = f"{curve.stream.replace('/', '_')}_{curve.layer}_s{curve.filter_size}_{curve.parameter}.csv"
        path = directory / name
        folds = max((len(p.fold_accuracies) for p in curve.points), default=0)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['candidate'] + [f"fold{i + 1}" for i in range(folds)] + ['mean'])
            for point in curve.points:
                writer.writerow([f"{point.candidate:g}"] + [f"{a:.6f}" for a in point.fold_accuracies]
                                + [f"{point.mean:.6f}"])
        paths.append(path)
    return paths


def write_timings(timings: Sequence[StageTiming], model_path: Union[str, Path]) -> Path:
    path = Path(f"{model_path}.timings.json")
    path.write_text(json.dumps([t.model_dump() for t in timings], indent=2) + "\n", encoding='utf-8')
    return path


def extract_features(images: np.ndarray, config: PipelineConfig, prefix: Union[str, Path],
                     model: Optional[PipelineModel] = None, threads: Optional[int] = None) -> Tuple[Path, Path]:
    """
    Write raw concatenated features as <prefix>.f32 (little-endian, row-major) and
    <prefix>.header.txt with one descriptor per column

    Without a model only the scattering block is written, using config's k values.
    """
    stacks = model.pca_stacks if model is not None else []
    config = model.config if model is not None else config
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    data_path = Path(f"{prefix}.f32")
    header_path = Path(f"{prefix}.header.txt")

    names = feature_descriptors(config, images.shape[1:], stacks)
    with open(data_path, 'wb') as f:
        for start in range(0, len(images), INFERENCE_CHUNK):
            block = raw_features(images[start:start + INFERENCE_CHUNK], config, stacks, threads)
            f.write(np.ascontiguousarray(block, dtype='<f4').tobytes())
    header_path.write_text(f"# {len(images)} samples x {len(names)} features, float32 little-endian\n"
                           + "\n".join(names) + "\n", encoding='utf-8')
    logger.info(f"✓ Wrote {len(images)} x {len(names)} features to {data_path}")
    return data_path, header_path


# === Dataset acquisition ===

def load_datasets(config: PipelineConfig) -> Tuple[Dataset, Dataset]:
    """
    (train, test) from the configured source; CIFAR-10 takes precedence over an image folder
    data.train_per_class draws a balanced training subsample with the run seed
    """
    data = config.data
    if data.cifar_dir:
        train, test = load_cifar10(data.cifar_dir)
    elif data.image_dir:
        full = load_image_folder(data.image_dir, data.target_size, data.exclude_classes)
        train, _, test = split_per_class(full, data.train_per_class or 30, data.val_per_class, config.seed)
        return train, test
    else:
        raise ConfigError("no dataset configured: set data.cifar_dir or data.image_dir")
    if data.train_per_class:
        train = subsample_balanced(train, data.train_per_class, config.seed)
    return train, test
