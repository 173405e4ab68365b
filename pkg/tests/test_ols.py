#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests for normalization and orthogonal least squares selection
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from _support import collect, run_tests

from errors import ConsistencyError, ParameterError, ValidationError
from ols import FeatureTable, OlsSelection, normalize_features, ols_select, reduce, select_for_class, \
    write_selection_report


def _brute_force_ols(X: np.ndarray, target: np.ndarray, budget: int, err_floor: float = 1e-8):
    """Greedy selection with an explicit projection onto the chosen columns at every step"""
    chosen, errs = [], []
    energy = target @ target
    for _ in range(budget):
        best, best_err = None, -np.inf
        for j in range(X.shape[1]):
            if j in chosen:
                continue
            x = X[:, j]
            if chosen:
                S = X[:, chosen]
                x = x - S @ np.linalg.lstsq(S, x, rcond=None)[0]
            if x @ x <= 1e-10 * (X[:, j] @ X[:, j]):
                continue
            err = (x @ target) ** 2 / ((x @ x) * energy)
            if err > best_err:
                best, best_err = j, err
        if best is None or best_err < err_floor:
            break
        chosen.append(best)
        errs.append(best_err)
    return chosen, errs


def test_selection_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(6, 13))
        d = int(rng.integers(3, 9))
        X = rng.standard_normal((n, d))
        target = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        if np.all(target == target[0]):
            target[0] = -target[0]
        budget = min(d, n - 1)
        positions, errs, _, _ = select_for_class(X, target, budget)
        expected, expected_errs = _brute_force_ols(X, target, budget)
        assert positions == expected, f"trial {trial}"
        np.testing.assert_allclose(errs, expected_errs, rtol=1e-7, atol=1e-12)


def test_residual_energy_decreases_and_matches_err():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 15))
    target = np.where(rng.random(40) < 0.3, 1.0, -1.0)
    _, errs, residuals, _ = select_for_class(X, target, 10)
    assert all(b < a for a, b in zip(residuals, residuals[1:]))
    energy = target @ target
    np.testing.assert_allclose(residuals, energy * (1 - np.cumsum(errs)), rtol=1e-8, atol=1e-9)


def test_basis_is_orthonormal():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((30, 20)).astype(np.float32)
    target = np.where(rng.random(30) < 0.5, 1.0, -1.0)
    positions, _, _, Q = select_for_class(X, target, 12)
    assert Q.shape == (30, len(positions))
    np.testing.assert_allclose(Q.T @ Q, np.eye(Q.shape[1]), atol=1e-10)


def test_duplicate_columns_are_never_both_selected():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((20, 6))
    X[:, 4] = X[:, 1]
    target = np.sign(X[:, 1] + 0.1 * rng.standard_normal(20))
    positions, _, _, _ = select_for_class(X, target, 6)
    assert not (1 in positions and 4 in positions)
    assert len(positions) <= 5


def test_selection_stops_at_err_floor():
    X = np.zeros((10, 3))
    X[:, 0] = 1.0
    X[:5, 1] = 1.0
    target = np.where(np.arange(10) < 5, 1.0, -1.0)
    positions, errs, residuals, _ = select_for_class(X, target, 3, err_floor=1e-8)
    assert len(positions) == 2
    assert residuals[-1] < 1e-12


def test_normalization_statistics():
    rng = np.random.default_rng(4)
    data = rng.normal(3.0, 2.0, (50, 6))
    data[:, 2] = 7.0
    table = normalize_features(data)
    assert table.column_ids.tolist() == [0, 1, 3, 4, 5]
    assert table.excluded == [2]
    np.testing.assert_allclose(table.data.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(table.data.var(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(table.means, data[:, [0, 1, 3, 4, 5]].mean(axis=0))

    again = normalize_features(FeatureTable.from_array(table.data))
    np.testing.assert_allclose(again.data, table.data, atol=1e-12)
    np.testing.assert_allclose(table.normalize_rows(data[:, [0, 1, 3, 4, 5]]), table.data, atol=1e-12)
    np.testing.assert_allclose(table.normalize_rows(data[:, [1, 4]], ids=[1, 4]), table.data[:, [1, 3]],
                               atol=1e-12)


def test_normalization_errors():
    with pytest.raises(ValidationError):
        normalize_features(np.ones((1, 3)))
    bad = np.ones((4, 3))
    bad[1, 1] = np.nan
    with pytest.raises(ValidationError):
        normalize_features(bad)
    with pytest.raises(ConsistencyError):
        FeatureTable.from_array(np.ones((3, 2))).normalize_rows(np.ones((1, 2)))
    table = normalize_features(np.random.default_rng(5).random((10, 4)))
    with pytest.raises(ConsistencyError):
        table.positions([7])


def test_ols_select_returns_raw_column_ids():
    rng = np.random.default_rng(6)
    labels = np.repeat([0, 1, 2], 10)
    data = rng.standard_normal((30, 12))
    data[:, 0] = 1.0
    data[:, 5] += 3.0 * (labels == 1)
    data[:, 9] += 3.0 * (labels == 2)
    table = normalize_features(data)
    selection = ols_select(table, labels, 3, threads=2)

    assert sorted(selection.per_class) == [0, 1, 2]
    assert all(len(ids) == 3 for ids in selection.per_class.values())
    assert 0 not in selection.union
    assert selection.per_class[1][0] == 5
    assert selection.per_class[2][0] == 9
    assert selection.union == sorted(set(selection.union))

    reduced = reduce(table, selection)
    assert reduced.column_ids.tolist() == selection.union
    np.testing.assert_array_equal(reduced.data, table.data[:, table.positions(selection.union)])
    np.testing.assert_array_equal(reduced.means, table.means[table.positions(selection.union)])


def test_ols_budget_and_empty_selection():
    table = normalize_features(np.random.default_rng(7).random((12, 3)))
    labels = np.repeat([0, 1], 6)
    with pytest.raises(ParameterError):
        ols_select(table, labels, 0)
    selection = ols_select(table, labels, 10)
    assert all(len(ids) <= 3 for ids in selection.per_class.values())
    with pytest.raises(ConsistencyError):
        reduce(table, OlsSelection(per_class={0: []}, err={0: []}, residual={0: []}))


def test_selection_report():
    selection = OlsSelection(per_class={0: [4, 1], 1: [2]}, err={0: [0.5, 0.1], 1: [0.3]},
                             residual={0: [1.0, 0.5], 1: [0.7]})
    assert selection.union == [1, 2, 4]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'selection.tsv'
        write_selection_report(selection, path, descriptors=[f"col{i}" for i in range(5)])
        lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0].split('\t') == ['class', 'step', 'column', 'err', 'descriptor']
    assert lines[1].split('\t')[:3] == ['0', '1', '4'] and lines[1].endswith('col4')
    assert len(lines) == 4


def main():
    return run_tests("OLS TESTS", collect(globals()))


if __name__ == "__main__":
    sys.exit(main())
