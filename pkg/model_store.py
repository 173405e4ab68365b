#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Model persistence
Single-file container: magic, version, JSON manifest, little-endian float32 arrays, SHA-256 trailer
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from data_models import CvCurve, PipelineConfig, TrainingManifest
from errors import ModelLoadError
from ols import OlsSelection
from pcanet import PcaLayerModel, PcaStack
from pipeline import MODEL_VERSION, PipelineModel
from svm import SvmBinary, SvmModel

logger = logging.getLogger(__name__)

MAGIC = b'SHDLMDL\x00'
DIGEST_SIZE = 32


def _collect(model: PipelineModel) -> Tuple[Dict[str, Any], List[Tuple[str, np.ndarray]]]:
    arrays: List[Tuple[str, np.ndarray]] = [
        ('norm/means', model.feature_means),
        ('norm/stds', model.feature_stds),
    ]
    stacks = []
    for index, stack in enumerate(model.pca_stacks):
        streams = {}
        for name in stack.streams:
            entry = {}
            for layer, layer_model in (('L3', stack.layer3[name]), ('L4', stack.layer4[name])):
                prefix = f"pca/{index}/{name}/{layer}"
                arrays.append((f"{prefix}/filters", layer_model.filters))
                arrays.append((f"{prefix}/eigenvalues", layer_model.eigenvalues))
                entry[layer] = {
                    'optimal_count': layer_model.optimal_count,
                    'log_param': layer_model.log_param,
                    'rank_deficient': layer_model.rank_deficient,
                }
            streams[name] = entry
        stacks.append({
            'filter_size': stack.filter_size,
            'stream_order': stack.streams,
            'streams': streams,
            'curves': [curve.model_dump(mode='json') for curve in stack.curves],
        })

    for index, binary in enumerate(model.svm.binaries):
        arrays.append((f"svm/{index}/support_vectors", binary.support_vectors))
        arrays.append((f"svm/{index}/dual_coef", binary.dual_coef))

    header = {
        'version': model.version,
        'config': model.config.model_dump(mode='json'),
        'manifest': model.manifest.model_dump(mode='json'),
        'selection': model.selection.model_dump(mode='json'),
        'feature_dim': model.feature_dim,
        'feature_ids': [int(i) for i in model.feature_ids],
        'pca': stacks,
        'svm': {
            'classes': model.svm.classes,
            'c': model.svm.c,
            'gamma': model.svm.gamma,
            'bias': [b.bias for b in model.svm.binaries],
        },
        'arrays': [name for name, _ in arrays],
    }
    return header, arrays


def serialize_model(model: PipelineModel) -> bytes:
    header, arrays = _collect(model)
    manifest = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [MAGIC, struct.pack('<I', MODEL_VERSION), struct.pack('<I', len(manifest)), manifest,
             struct.pack('<I', len(arrays))]
    for name, array in arrays:
        encoded = name.encode('utf-8')
        data = np.ascontiguousarray(array, dtype='<f4')
        parts.append(struct.pack('<H', len(encoded)) + encoded)
        parts.append(struct.pack('<B', data.ndim) + struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(data.tobytes())
    body = b''.join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(model: PipelineModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = serialize_model(model)
    path.write_bytes(payload)
    logger.info(f"✓ Model saved to {path} ({len(payload) / 1024:.1f} KiB)")
    return path


class _Reader:
    def __init__(self, body: bytes, offset: int):
        self.body = body
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.body):
            raise ModelLoadError(f"model file ends early at byte {self.offset}")
        chunk = self.body[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_model(payload: bytes) -> PipelineModel:
    if len(payload) < len(MAGIC) + 4 + DIGEST_SIZE or payload[:len(MAGIC)] != MAGIC:
        raise ModelLoadError("not an SHDL model file (bad magic)")
    body, digest = payload[:-DIGEST_SIZE], payload[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelLoadError("model checksum mismatch (file truncated or corrupted)")

    reader = _Reader(body, len(MAGIC))
    (version,) = reader.unpack('<I')
    if version != MODEL_VERSION:
        raise ModelLoadError(f"model version {version} is not supported (expected {MODEL_VERSION})")
    (manifest_len,) = reader.unpack('<I')
    try:
        header = json.loads(reader.take(manifest_len).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelLoadError(f"model manifest is unreadable: {e}")

    (count,) = reader.unpack('<I')
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(body):
        raise ModelLoadError(f"{len(body) - reader.offset} trailing bytes after the last array")

    try:
        return _build(header, arrays)
    except (KeyError, TypeError, ValueError, PydanticValidationError) as e:
        raise ModelLoadError(f"model content is inconsistent: {e}")


def _build(header: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> PipelineModel:
    stacks = []
    for index, entry in enumerate(header['pca']):
        layers: Dict[str, Dict[str, PcaLayerModel]] = {'L3': {}, 'L4': {}}
        for name in entry['stream_order']:
            stream = entry['streams'][name]
            for layer in ('L3', 'L4'):
                prefix = f"pca/{index}/{name}/{layer}"
                layers[layer][name] = PcaLayerModel(
                    filters=arrays[f"{prefix}/filters"],
                    eigenvalues=arrays[f"{prefix}/eigenvalues"],
                    **stream[layer]
                )
        stacks.append(PcaStack(
            filter_size=entry['filter_size'],
            layer3=layers['L3'],
            layer4=layers['L4'],
            curves=[CvCurve.model_validate(c) for c in entry['curves']]
        ))

    svm_header = header['svm']
    binaries = [
        SvmBinary(support_vectors=arrays[f"svm/{i}/support_vectors"],
                  dual_coef=arrays[f"svm/{i}/dual_coef"], bias=bias)
        for i, bias in enumerate(svm_header['bias'])
    ]
    return PipelineModel(
        version=header['version'],
        config=PipelineConfig.model_validate(header['config']),
        pca_stacks=stacks,
        feature_dim=header['feature_dim'],
        feature_ids=np.asarray(header['feature_ids'], dtype=np.int64),
        feature_means=arrays['norm/means'],
        feature_stds=arrays['norm/stds'],
        selection=OlsSelection.model_validate(header['selection']),
        svm=SvmModel(classes=svm_header['classes'], c=svm_header['c'], gamma=svm_header['gamma'],
                     binaries=binaries),
        manifest=TrainingManifest.model_validate(header['manifest'])
    )


def load_model(path: Union[str, Path]) -> PipelineModel:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise ModelLoadError(f"cannot read model {path}: {e}")
    model = deserialize_model(payload)
    logger.info(f"✓ Model loaded from {path}: {len(model.svm.classes)} classes, "
                f"{len(model.feature_ids)} selected features")
    return model
