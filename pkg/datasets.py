#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dataset loading
CIFAR-10 binary batches, class-per-folder image trees and balanced subsampling
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from data_models import CIFAR10_CLASSES, Dataset
from errors import DataError, FormatError

logger = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
IMAGE_SUFFIXES = {'.jpg', '.jpeg', '.png', '.bmp', '.gif', '.tif', '.tiff', '.ppm', '.pgm'}


def read_cifar_batch(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Parse one binary batch: records of 1 label byte + 3072 channel-planar pixels

    Returns:
        (uint8 images N x 32 x 32 x 3, int64 labels)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read CIFAR batch {path}: {e}")

    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path.name}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                          offset=len(raw) - len(raw) % CIFAR_RECORD)

    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= len(CIFAR10_CLASSES))
    if bad.size:
        raise FormatError(f"{path.name}: label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)

    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return images, labels


def _cifar_root(directory: Path) -> Path:
    nested = directory / 'cifar-10-batches-bin'
    return nested if nested.is_dir() else directory


def _cifar_class_names(root: Path) -> List[str]:
    meta = root / 'batches.meta.txt'
    if meta.exists():
        names = [line.strip() for line in meta.read_text(encoding='utf-8').splitlines() if line.strip()]
        if len(names) == len(CIFAR10_CLASSES):
            return names
    return list(CIFAR10_CLASSES)


def load_cifar10(directory: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    """
    Load the CIFAR-10 training (50,000) and test (10,000) splits from the binary distribution

    Pixels are scaled to [0, 1] float32.
    """
    root = _cifar_root(Path(directory))
    if not root.is_dir():
        raise DataError(f"CIFAR-10 directory not found: {directory}")
    return load_cifar_split(root, 'train'), load_cifar_split(root, 'test')


def load_cifar_split(root: Union[str, Path], split: str) -> Dataset:
    root = _cifar_root(Path(root))
    files = CIFAR_TRAIN_FILES if split == 'train' else [CIFAR_TEST_FILE]
    missing = [name for name in files if not (root / name).exists()]
    if missing:
        raise DataError(f"CIFAR-10 files missing in {root}: {', '.join(missing)}")

    parts = [read_cifar_batch(root / name) for name in files]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts])

    dataset = Dataset(images=images, labels=labels, class_names=_cifar_class_names(root),
                      split='train' if split == 'train' else 'test', source=str(root))
    logger.info(f"✓ Loaded CIFAR-10 {split}: {len(dataset)} images")
    return dataset


def _load_image(path: Path, target_size: int) -> Optional[np.ndarray]:
    try:
        with Image.open(path) as img:
            rgb = img.convert('RGB').resize((target_size, target_size), Image.Resampling.BICUBIC)
            return np.asarray(rgb, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as e:
        logger.warning(f"Skipping undecodable image {path}: {e}")
        return None


def load_image_folder(directory: Union[str, Path], target_size: int = 128,
                      exclude: Sequence[str] = ('BACKGROUND_Google',)) -> Dataset:
    """
    One sub-directory per class, class names sorted; images resized to target_size squared
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"image directory not found: {directory}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and d.name not in set(exclude))
    if not class_dirs:
        raise DataError(f"no class directories in {root}")

    images, labels, skipped = [], [], 0
    for index, class_dir in enumerate(class_dirs):
        files = sorted(f for f in class_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        loaded = 0
        for path in files:
            pixels = _load_image(path, target_size)
            if pixels is None:
                skipped += 1
                continue
            images.append(pixels)
            labels.append(index)
            loaded += 1
        if loaded == 0:
            raise DataError(f"class '{class_dir.name}' has no readable images")
        logger.debug(f"{class_dir.name}: {loaded} images")

    if skipped:
        logger.warning(f"{skipped} undecodable images skipped")
    dataset = Dataset(images=np.stack(images), labels=np.asarray(labels, dtype=np.int64),
                      class_names=[d.name for d in class_dirs], split='train', source=str(root))
    logger.info(f"✓ Loaded {len(dataset)} images in {dataset.num_classes} classes from {root}")
    return dataset


def subsample_balanced(dataset: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Exactly n_per_class samples from every class, drawn with the given seed"""
    if n_per_class < 1:
        raise DataError(f"samples per class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    chosen = []
    for cls, name in enumerate(dataset.class_names):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < n_per_class:
            raise DataError(f"class '{name}' has {len(members)} samples, {n_per_class} requested")
        chosen.append(rng.permutation(members)[:n_per_class])
    return dataset.subset(np.sort(np.concatenate(chosen)))


def split_per_class(dataset: Dataset, n_train: int, n_val: int,
                    seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """
    Per class: n_train training images, n_val validation images, the rest for testing
    """
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for cls, name in enumerate(dataset.class_names):
        members = rng.permutation(np.flatnonzero(dataset.labels == cls))
        if len(members) < n_train + n_val:
            raise DataError(f"class '{name}' has {len(members)} images, needs at least {n_train + n_val}")
        train.append(members[:n_train])
        val.append(members[n_train:n_train + n_val])
        test.append(members[n_train + n_val:])
    return (dataset.subset(np.sort(np.concatenate(train)), 'train'),
            dataset.subset(np.sort(np.concatenate(val)), 'val'),
            dataset.subset(np.sort(np.concatenate(test)), 'test'))
