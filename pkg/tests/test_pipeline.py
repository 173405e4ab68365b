#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
End-to-end tests on small synthetic gratings: training, evaluation, sweeps and output files
"""

import csv
import json
import sys
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from _support import collect, grating_splits, run_tests, synthetic_dataset, tiny_config, trained_tiny_model

from data_models import Dataset, SvmConfig
from errors import ConfigError, ConsistencyError, DataError, DimensionError, ProtocolError
from pcanet import train_pcanet_stack
from pipeline import (backend_fold, evaluate, extract_features, feature_descriptors, load_datasets, sweep_sizes,
                      train_pipeline, transform_features, write_cv_curves, write_metrics, write_sweep_csv,
                      write_timings)
from scatter import build_layout
from svm import CrossValidator


def _train_set() -> Dataset:
    return grating_splits()[0]


def _test_set() -> Dataset:
    return grating_splits()[1]


def test_training_manifest():
    model, timings = trained_tiny_model()
    manifest = model.manifest
    assert manifest.chain_is_consistent()
    assert [r.stage for r in manifest.dimension_chain] == ['scatter', 'concatenate', 'normalize', 'ols', 'svm']
    assert manifest.image_shape == [16, 16, 1]
    assert manifest.n_train == 18 and manifest.seed == 0
    assert manifest.dataset_hash == _train_set().content_hash()
    assert len(manifest.cv_curves) == 4 * 2 * 2
    assert manifest.dimension_chain[-1].output_dim == 3
    assert [t.stage for t in timings] == ['scatter-k', 'scatter', 'pca', 'normalize', 'ols', 'svm']
    assert manifest.ablation == {} and manifest.ablation_monotonic is None
    assert sorted(manifest.symmetry_gaps) == [1, 2]
    assert all(len(gaps) == 2 and min(gaps) >= 0 for gaps in manifest.symmetry_gaps.values())


def test_model_state():
    model, _ = trained_tiny_model()
    assert model.feature_ids.tolist() == model.selection.union
    assert len(feature_descriptors(model.config, (16, 16, 1), model.pca_stacks)) == model.feature_dim
    layout = build_layout((16, 16, 1), model.config.scatter)
    assert model.feature_dim > layout.total
    assert model.feature_means.dtype == np.float32
    assert model.svm.binaries[0].support_vectors.dtype == np.float32
    assert all(len(ids) <= 8 for ids in model.selection.per_class.values())
    for stack in model.pca_stacks:
        for layer in list(stack.layer3.values()) + list(stack.layer4.values()):
            assert layer.filters.dtype == np.float32
            assert layer.log_param in (1.0, 2.0)


def test_evaluate():
    model, _ = trained_tiny_model()
    report = evaluate(model, _test_set())
    assert report.n_samples == 12
    assert 0.5 <= report.accuracy <= 1.0
    assert sum(map(sum, report.confusion)) == 12
    assert sorted(report.per_class_accuracy) == ['class0', 'class1', 'class2']
    diag = sum(report.confusion[i][i] for i in range(3))
    assert abs(diag / 12 - report.accuracy) < 1e-12
    assert report.unseen_classes == []

    features = transform_features(model, _test_set().images)
    assert features.shape == (12, len(model.feature_ids))


def test_evaluate_rejects_other_image_shapes():
    model, _ = trained_tiny_model()
    wrong = synthetic_dataset(n_per_class=2, num_classes=3, size=24, channels=1)
    with pytest.raises(DimensionError):
        evaluate(model, wrong)


def test_training_is_deterministic():
    model, _ = trained_tiny_model()
    again = train_pipeline(tiny_config(), _train_set())
    assert again.feature_ids.tolist() == model.feature_ids.tolist()
    for a, b in zip(model.svm.binaries, again.svm.binaries):
        np.testing.assert_array_equal(a.dual_coef, b.dual_coef)
    assert again.manifest == model.manifest


def test_stage_tag_on_failure():
    tiny = synthetic_dataset(n_per_class=2, num_classes=3, channels=1)
    with pytest.raises(ProtocolError) as info:
        train_pipeline(tiny_config(), tiny)
    assert info.value.stage == 'pca'
    assert info.value.exit_code == 4

    empty = Dataset(images=np.zeros((0, 16, 16, 1), dtype=np.float32), labels=np.zeros(0, dtype=np.int64),
                    class_names=['a', 'b'])
    with pytest.raises(DataError):
        train_pipeline(tiny_config(), empty)


def test_non_orthonormal_layer_stops_training():
    def skewed_stack(*args, **kwargs):
        stack = train_pcanet_stack(*args, **kwargs)
        name = stack.streams[0]
        layer = stack.layer4[name]
        return stack.model_copy(update={
            'layer4': {**stack.layer4, name: layer.model_copy(update={'filters': layer.filters * 1.01})}
        })

    with patch('pipeline.train_pcanet_stack', skewed_stack):
        with pytest.raises(ConsistencyError) as info:
            train_pipeline(tiny_config(), _train_set())
    assert info.value.stage == 'pca'
    assert 'orthonormal' in str(info.value)


def test_grid_search_selects_columns_inside_each_fold():
    rng = np.random.default_rng(3)
    features = rng.standard_normal((30, 12)).astype(np.float32)
    labels = np.repeat([0, 1, 2], 10)
    config = tiny_config()
    train_idx, val_idx = CrossValidator(folds=3, seed=0).split(labels)[0]

    train, val = backend_fold(features, labels, config)(train_idx, val_idx)
    assert train.shape[0] == len(train_idx) and val.shape == (len(val_idx), train.shape[1])

    altered = features.copy()
    altered[val_idx] = 100.0 * rng.standard_normal((len(val_idx), 12))
    again, _ = backend_fold(altered, labels, config)(train_idx, val_idx)
    np.testing.assert_array_equal(train, again)


def test_training_with_grid_search():
    svm = SvmConfig(grid_search=True, c_grid=[1.0, 10.0], gamma_grid=[1.0])
    timings = []
    model = train_pipeline(tiny_config(svm=svm), _train_set(), timings=timings)
    assert 'svm-grid' in [t.stage for t in timings]
    assert model.svm.c in (1.0, 10.0)
    assert model.manifest.svm_params['c'] == model.svm.c


def test_ablation_report():
    model = train_pipeline(tiny_config(ablation=True), _train_set())
    ablation = model.manifest.ablation
    assert list(ablation) == ['HC', 'HC+L3', 'HC+L3+L4']
    assert all(0.0 <= v <= 1.0 for v in ablation.values())
    expected = all(b >= a for a, b in zip(list(ablation.values()), list(ablation.values())[1:]))
    assert model.manifest.ablation_monotonic == expected


def test_sweep_records_failed_cells():
    report = sweep_sizes(tiny_config(), _train_set(), _test_set(), sizes=[6, 18], seeds=[0])
    assert [(r.size, r.status) for r in report.rows] == [(6, 'failed:pca'), (18, 'ok')]
    assert list(report.mean_accuracy_by_size) == [18]
    assert report.monotonic
    assert len(report.failed_rows()) == 1

    with tempfile.TemporaryDirectory() as tmp:
        path = write_sweep_csv(report, Path(tmp) / 'sweep.csv')
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.reader(f))
    assert rows[0] == ['size', 'seed', 'accuracy', 'mean_per_class_accuracy', 'status']
    assert rows[1][4] == 'failed:pca' and rows[1][2] == ''
    assert rows[-1][:2] == ['18', 'mean']

    with pytest.raises(ConfigError):
        sweep_sizes(tiny_config(), _train_set(), _test_set(), sizes=[6, 100], seeds=[0])
    with pytest.raises(ConfigError):
        sweep_sizes(tiny_config(), _train_set(), _test_set(), sizes=[12, 6], seeds=[0])


def test_sweep_records_unexpected_failures():
    model, _ = trained_tiny_model()

    def flaky(config, subset, threads=None):
        if config.seed == 1:
            raise np.linalg.LinAlgError("SVD did not converge")
        return model

    with patch('pipeline.train_pipeline', flaky):
        report = sweep_sizes(tiny_config(), _train_set(), _test_set(), sizes=[18], seeds=[0, 1])
    assert [(r.seed, r.status) for r in report.rows] == [(0, 'ok'), (1, 'failed:LinAlgError')]
    assert list(report.mean_accuracy_by_size) == [18]


def test_output_files():
    model, timings = trained_tiny_model()
    report = evaluate(model, _test_set())
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        json_path, csv_path = write_metrics(report, tmp / 'metrics')
        assert json.loads(json_path.read_text(encoding='utf-8'))['n_samples'] == 12
        with open(csv_path, newline='', encoding='utf-8') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['class', 'n', 'accuracy'] and rows[-2][0] == 'overall'

        paths = write_cv_curves(model.manifest.cv_curves, tmp / 'curves')
        assert len(paths) == 16
        header = paths[0].read_text(encoding='utf-8').splitlines()[0]
        assert header == 'candidate,fold1,fold2,fold3,mean'

        timing_path = write_timings(timings, tmp / 'model.bin')
        assert timing_path.name == 'model.bin.timings.json'
        assert len(json.loads(timing_path.read_text(encoding='utf-8'))) == len(timings)


def test_extract_features():
    model, _ = trained_tiny_model()
    images = _test_set().images[:5]
    with tempfile.TemporaryDirectory() as tmp:
        data_path, header_path = extract_features(images, tiny_config(), Path(tmp) / 'scatter_only')
        layout = build_layout(images.shape[1:], tiny_config().scatter)
        assert data_path.stat().st_size == 5 * layout.total * 4
        assert len(header_path.read_text(encoding='utf-8').splitlines()) == layout.total + 1

        data_path, header_path = extract_features(images, tiny_config(), Path(tmp) / 'full', model)
        values = np.fromfile(data_path, dtype='<f4').reshape(5, -1)
        assert values.shape[1] == model.feature_dim
        assert np.all(np.isfinite(values))


def test_load_datasets_needs_a_source():
    with pytest.raises(ConfigError):
        load_datasets(tiny_config())


def main():
    return run_tests("PIPELINE TESTS", collect(globals()))


if __name__ == "__main__":
    sys.exit(main())
