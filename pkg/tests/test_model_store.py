#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests for the single-file model container
"""

import hashlib
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

from _support import collect, grating_splits, run_tests, trained_tiny_model

from errors import ModelLoadError
from model_store import DIGEST_SIZE, MAGIC, deserialize_model, load_model, save_model, serialize_model
from pipeline import transform_features
from svm import predict_gsvm


def _resign(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def test_round_trip_is_bit_identical():
    model, _ = trained_tiny_model()
    payload = serialize_model(model)
    assert payload[:len(MAGIC)] == MAGIC
    restored = deserialize_model(payload)
    assert serialize_model(restored) == payload
    assert restored.manifest == model.manifest
    assert restored.config == model.config
    np.testing.assert_array_equal(restored.feature_ids, model.feature_ids)


def test_loaded_model_predicts_identically():
    model, _ = trained_tiny_model()
    test = grating_splits()[1]
    with tempfile.TemporaryDirectory() as tmp:
        path = save_model(model, Path(tmp) / 'nested' / 'model.bin')
        restored = load_model(path)
    a = predict_gsvm(model.svm, transform_features(model, test.images))
    b = predict_gsvm(restored.svm, transform_features(restored, test.images))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_serialization_is_deterministic():
    model, _ = trained_tiny_model()
    assert serialize_model(model) == serialize_model(model)


def test_corruption_is_detected():
    model, _ = trained_tiny_model()
    payload = serialize_model(model)

    with pytest.raises(ModelLoadError):
        deserialize_model(payload[:len(payload) // 2])
    flipped = bytearray(payload)
    flipped[len(payload) // 2] ^= 0xFF
    with pytest.raises(ModelLoadError):
        deserialize_model(bytes(flipped))
    with pytest.raises(ModelLoadError):
        deserialize_model(b'NOTAMODEL' + payload[9:])
    with pytest.raises(ModelLoadError):
        deserialize_model(b'')


def test_version_and_trailing_bytes():
    model, _ = trained_tiny_model()
    body = serialize_model(model)[:-DIGEST_SIZE]
    future = body[:len(MAGIC)] + struct.pack('<I', 99) + body[len(MAGIC) + 4:]
    with pytest.raises(ModelLoadError) as info:
        deserialize_model(_resign(future))
    assert 'version 99' in str(info.value)
    assert info.value.exit_code == 3

    with pytest.raises(ModelLoadError):
        deserialize_model(_resign(body + b'\x00\x00'))


def test_missing_file():
    with pytest.raises(ModelLoadError):
        load_model('/nonexistent/model.bin')


def main():
    return run_tests("MODEL STORE TESTS", collect(globals()))


if __name__ == "__main__":
    sys.exit(main())
