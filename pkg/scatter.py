#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Parametric log DTCWT scattering
Multi-resolution inputs, log-parameter selection and pooled L0/L1/L2 coefficients
"""

import itertools
import logging
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from data_models import ScatterConfig
from errors import ConfigError, DimensionError, ParameterError, ValidationError
from wavelet import ORIENTATIONS, FilterBank, dtcwt_forward, modulus
from workers import parallel_map

logger = logging.getLogger(__name__)

LAYERS: Tuple[str, ...] = ('L0', 'L1', 'L2')

# Larger sample sets are thinned to this many evenly spaced values before the k scan
MAX_K_SAMPLES = 65536


class PathKey(NamedTuple):
    """Path descriptor of one pooled map"""
    resolution: str
    layer: str
    channel: int
    scales: Tuple[int, ...] = ()
    orientations: Tuple[int, ...] = ()

    def label(self) -> str:
        parts = [self.resolution, self.layer, f"c{self.channel}"]
        if self.scales:
            parts.append("j" + "-".join(str(j) for j in self.scales))
        if self.orientations:
            parts.append("r" + "-".join(str(r) for r in self.orientations))
        return "/".join(parts)


class LogParamSelection(BaseModel):
    k: float
    gap: float
    degenerate: bool = False


class BlockSpec(BaseModel):
    """
    One (resolution, layer) block of the flattened feature vector
    L0 shape: (C, gh, gw); L1: (C, J, 6, gh, gw); L2: (C, pairs, 6, 6, gh, gw)
    """
    model_config = ConfigDict(frozen=True)

    resolution: str
    layer: str
    shape: Tuple[int, ...]
    offset: int
    scale_paths: List[Tuple[int, ...]]

    @property
    def name(self) -> str:
        return f"{self.resolution}/{self.layer}"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ScatterLayout(BaseModel):
    """Flattening order: resolution, layer, colour channel, scale path, orientation path, cell"""
    model_config = ConfigDict(frozen=True)

    blocks: List[BlockSpec]

    @property
    def total(self) -> int:
        return sum(b.size for b in self.blocks)

    def block(self, name: str) -> BlockSpec:
        for spec in self.blocks:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def slice(self, flat: np.ndarray, name: str) -> np.ndarray:
        """View of one block reshaped to its native shape; leading batch axes are kept"""
        spec = self.block(name)
        part = flat[..., spec.offset:spec.offset + spec.size]
        return part.reshape(flat.shape[:-1] + spec.shape)

    def keys(self) -> Iterator[PathKey]:
        for spec in self.blocks:
            channels = spec.shape[0]
            if spec.layer == 'L0':
                for c in range(channels):
                    yield PathKey(spec.resolution, 'L0', c)
            elif spec.layer == 'L1':
                for c, path, r in itertools.product(range(channels), spec.scale_paths, ORIENTATIONS):
                    yield PathKey(spec.resolution, 'L1', c, path, (r,))
            else:
                for c, path, r1, r2 in itertools.product(range(channels), spec.scale_paths,
                                                         ORIENTATIONS, ORIENTATIONS):
                    yield PathKey(spec.resolution, 'L2', c, path, (r1, r2))

    def descriptors(self) -> List[str]:
        """One descriptor per flattened column"""
        labels = []
        spec_iter = iter(self.keys())
        for spec in self.blocks:
            n_maps = spec.size // (spec.shape[-2] * spec.shape[-1])
            cells = [f"@{y},{x}" for y in range(spec.shape[-2]) for x in range(spec.shape[-1])]
            for _ in range(n_maps):
                label = next(spec_iter).label()
                labels.extend(label + cell for cell in cells)
        return labels


class ScatterFeatures(BaseModel):
    """Pooled scattering coefficients of one image, stored block-wise"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layout: ScatterLayout
    blocks: Dict[str, np.ndarray]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.blocks[spec.name].ravel() for spec in self.layout.blocks])

    def entries(self) -> Iterator[Tuple[PathKey, np.ndarray]]:
        """Yield (path descriptor, pooled 2D grid) in flattening order"""
        keys = self.layout.keys()
        for spec in self.layout.blocks:
            maps = self.blocks[spec.name].reshape((-1,) + spec.shape[-2:])
            for grid in maps:
                yield next(keys), grid


# === Resolutions and log parameters ===

def make_resolutions(image: np.ndarray, factors: Sequence[float]) -> List[np.ndarray]:
    """
    Bicubic upscaled copies of an H x W x C image, one per factor
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValidationError("cannot rescale an empty image")
    if image.ndim == 2:
        image = image[:, :, None]

    resolutions = []
    for factor in factors:
        if factor < 1.0:
            raise ParameterError(f"resolution factor must be >= 1, got {factor}")
        if factor == 1.0:
            resolutions.append(image.copy())
            continue
        channels = [
            ndimage.zoom(image[:, :, c], factor, order=3, mode='reflect')
            for c in range(image.shape[2])
        ]
        resolutions.append(np.stack(channels, axis=-1))
    return resolutions


def select_log_parameter(samples: np.ndarray, grid: Sequence[float]) -> LogParamSelection:
    """
    Grid k minimizing |mean(log(u + k)) - median(log(u + k))|, ties toward smaller k

    Samples beyond MAX_K_SAMPLES are thinned to evenly spaced values first, so on
    large samples the argmin is taken over the thinned set and may differ from the
    full-sample argmin by a neighbouring grid point.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    if samples.size == 0:
        raise ValidationError("cannot select a log parameter from an empty sample")
    if grid.size == 0 or np.any(grid <= 0):
        raise ParameterError("log parameter grid must be non-empty and strictly positive")
    if np.any(samples < 0) or not np.all(np.isfinite(samples)):
        raise ValidationError("log parameter samples must be finite and non-negative")

    if np.ptp(samples) == 0:
        return LogParamSelection(k=float(grid[0]), gap=0.0, degenerate=True)

    if samples.size > MAX_K_SAMPLES:
        samples = samples[np.linspace(0, samples.size - 1, MAX_K_SAMPLES).astype(np.int64)]

    logs = np.log(samples[None, :] + grid[:, None])
    gaps = np.abs(logs.mean(axis=1) - np.median(logs, axis=1))
    best = int(np.argmin(gaps))
    return LogParamSelection(k=float(grid[best]), gap=float(gaps[best]))


def apply_log(values: np.ndarray, k: float) -> np.ndarray:
    """Parametric log transformation log(u + k)"""
    if k <= 0:
        raise ParameterError(f"log parameter must be > 0, got {k}")
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValidationError("parametric log expects non-negative values")
    return np.log(values + k)


# === Pooling ===

def _pool_axis(arr: np.ndarray, target: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == target:
        return arr
    if n > target:
        edges = (np.arange(target) * n) // target
        counts = np.diff(np.append(edges, n))
        sums = np.add.reduceat(arr, edges, axis=axis)
        shape = [1] * arr.ndim
        shape[axis] = target
        return sums / counts.reshape(shape)
    index = (np.arange(target) * n) // target
    return np.take(arr, index, axis=axis)


def pool_to_grid(arr: np.ndarray, grid: Tuple[int, int]) -> np.ndarray:
    """
    Local averaging + decimation onto grid over the last two axes
    Maps coarser than the grid are replicated (nearest neighbour)
    """
    return _pool_axis(_pool_axis(arr, grid[0], arr.ndim - 2), grid[1], arr.ndim - 1)


# === Transform ===

def scale_paths(levels: int, rule: str) -> List[Tuple[int, int]]:
    """Admissible (j1, j2) second-layer scale paths"""
    if rule == 'adjacent':
        return [(j1, j1 + 1) for j1 in range(1, levels)]
    return [(j1, j2) for j1 in range(1, levels) for j2 in range(j1 + 1, levels + 1)]


def _resolution_shape(shape: Tuple[int, int], factor: float) -> Tuple[int, int]:
    if factor == 1.0:
        return shape
    return int(round(shape[0] * factor)), int(round(shape[1] * factor))


def build_layout(image_shape: Tuple[int, ...], config: ScatterConfig) -> ScatterLayout:
    """Feature layout for H x W x C images under a config, without running the transform"""
    height, width = image_shape[:2]
    channels = image_shape[2] if len(image_shape) > 2 else 1
    n_orient = len(ORIENTATIONS)

    blocks: List[BlockSpec] = []
    offset = 0
    for index, (name, factor, levels) in enumerate(
            zip(config.resolution_names, config.resolution_factors, config.scales)):
        rh, rw = _resolution_shape((height, width), factor)
        pool = config.pooling_for(index)
        grid = (-(-rh // pool), -(-rw // pool))
        pairs = scale_paths(levels, config.second_layer_rule)
        shapes = {
            'L0': ((channels,) + grid, []),
            'L1': ((channels, levels, n_orient) + grid, [(j,) for j in range(1, levels + 1)]),
            'L2': ((channels, len(pairs), n_orient, n_orient) + grid, pairs),
        }
        for layer in LAYERS:
            shape, paths = shapes[layer]
            spec = BlockSpec(resolution=name, layer=layer, shape=shape, offset=offset, scale_paths=paths)
            blocks.append(spec)
            offset += spec.size
    return ScatterLayout(blocks=blocks)


def _log_param(table: Dict[int, float], scale: int, layer: str) -> float:
    if scale not in table:
        raise ConfigError(f"no {layer} log parameter configured for scale j={scale}")
    return table[scale]


def first_layer_envelopes(channel: np.ndarray, levels: int, bank: FilterBank) -> List[np.ndarray]:
    """Unpooled moduli |x * psi_{j,r}| per scale, each h x w x 6"""
    pyramid = dtcwt_forward(channel, levels, bank)
    return [modulus(h) for h in pyramid.highpasses]


def _second_layer(u1: np.ndarray, j1: int, levels: int, config: ScatterConfig,
                  bank: FilterBank, log: bool = True) -> Dict[int, np.ndarray]:
    """Envelopes |U1_rs[j1, r1] * psi_{j2, r2}| for every admissible j2, keyed by j2 -> (6, 6, h, w)"""
    targets = [j2 for (a, j2) in scale_paths(levels, config.second_layer_rule) if a == j1]
    depth = max(targets) - j1
    per_j2: Dict[int, List[np.ndarray]] = {j2: [] for j2 in targets}
    for r1 in range(len(ORIENTATIONS)):
        pyramid = dtcwt_forward(u1[:, :, r1], depth, bank)
        for j2 in targets:
            env = modulus(pyramid.highpasses[j2 - j1 - 1])
            if log and j2 < levels:
                env = apply_log(env, _log_param(config.log_params_l2, j2, 'L2'))
            per_j2[j2].append(np.moveaxis(env, -1, 0))
    return {j2: np.stack(maps) for j2, maps in per_j2.items()}


def _scatter_channel(x: np.ndarray, levels: int, grid: Tuple[int, int], pairs: List[Tuple[int, int]],
                     config: ScatterConfig, bank: FilterBank) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    l0 = pool_to_grid(x, grid)

    envelopes = first_layer_envelopes(x, levels, bank)
    u1_maps = []
    l1 = np.empty((levels, len(ORIENTATIONS)) + grid)
    for j, env in enumerate(envelopes, start=1):
        # no log at the coarsest scale
        u1 = apply_log(env, _log_param(config.log_params_l1, j, 'L1')) if j < levels else env
        u1_maps.append(u1)
        l1[j - 1] = pool_to_grid(np.moveaxis(u1, -1, 0), grid)

    l2 = np.empty((len(pairs), len(ORIENTATIONS), len(ORIENTATIONS)) + grid)
    by_j1: Dict[int, Dict[int, np.ndarray]] = {}
    for p, (j1, j2) in enumerate(pairs):
        if j1 not in by_j1:
            by_j1[j1] = _second_layer(u1_maps[j1 - 1], j1, levels, config, bank)
        l2[p] = pool_to_grid(by_j1[j1][j2], grid)
    return l0, l1, l2


def scatter_transform(image: np.ndarray, config: ScatterConfig, bank: FilterBank) -> ScatterFeatures:
    """
    Pooled L0/L1/L2 coefficients of an H x W x C image at every configured resolution

    Each colour channel is decomposed independently; second-layer paths follow
    config.second_layer_rule.
    """
    if bank.family != config.filter_family:
        raise DimensionError(f"filter bank '{bank.family}' does not match config family '{config.filter_family}'")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.size == 0 or not np.all(np.isfinite(image)):
        raise ValidationError("scatter input must be a non-empty finite image")

    layout = build_layout(image.shape, config)
    blocks: Dict[str, np.ndarray] = {}
    for index, (name, levels, resized) in enumerate(
            zip(config.resolution_names, config.scales, make_resolutions(image, config.resolution_factors))):
        if min(resized.shape[:2]) < 2 ** levels:
            raise DimensionError(
                f"{name} image {resized.shape[0]}x{resized.shape[1]} admits fewer than {levels} levels"
            )
        spec = layout.block(f"{name}/L2")
        grid = spec.shape[-2:]
        outputs = [_scatter_channel(resized[:, :, c], levels, grid, spec.scale_paths, config, bank)
                   for c in range(resized.shape[2])]
        for layer, layer_maps in zip(LAYERS, zip(*outputs)):
            blocks[f"{name}/{layer}"] = np.stack(layer_maps)

    return ScatterFeatures(layout=layout, blocks=blocks)


def scatter_batch(images: np.ndarray, config: ScatterConfig, bank: FilterBank,
                  threads: Optional[int] = None) -> np.ndarray:
    """Flattened scattering features for N images as an N x D float32 matrix"""
    rows = parallel_map(
        lambda img: scatter_transform(img, config, bank).flatten().astype(np.float32),
        list(images), threads
    )
    return np.stack(rows) if rows else np.empty((0, build_layout(images.shape[1:], config).total), np.float32)


# === Streams for the PCA layers ===

def stream_names(config: ScatterConfig) -> List[str]:
    return [f"{r}/{layer}" for r in config.resolution_names for layer in ('L1', 'L2')]


def scatter_stream(flat: np.ndarray, layout: ScatterLayout, name: str) -> np.ndarray:
    """
    PCA input stream from flattened features: N x planes x gh x gw x P

    Colour channels are planes. L1 channels are (scale, orientation);
    L2 channels are orientation pairs averaged over their scale paths.
    """
    block = layout.slice(np.asarray(flat, dtype=np.float64), name)
    if name.endswith('/L1'):
        n, c, levels, n_orient, gh, gw = block.shape
        maps = block.reshape(n, c, levels * n_orient, gh, gw)
    elif name.endswith('/L2'):
        n, c, _, n_orient, _, gh, gw = block.shape
        maps = block.mean(axis=2).reshape(n, c, n_orient * n_orient, gh, gw)
    else:
        raise KeyError(f"{name} is not a PCA stream")
    return np.ascontiguousarray(np.moveaxis(maps, 2, -1))


# === Log parameter estimation over a training sample ===

def _sample_indices(n: int, limit: int) -> np.ndarray:
    if limit <= 0 or n <= limit:
        return np.arange(n)
    return np.linspace(0, n - 1, limit).astype(np.int64)


def _per_image_k(samples_by_scale: Dict[int, List[np.ndarray]], grid: np.ndarray) -> Dict[int, float]:
    return {
        j: select_log_parameter(np.concatenate([s.ravel() for s in parts]), grid).k
        for j, parts in samples_by_scale.items() if parts
    }


def select_scatter_log_params(images: np.ndarray, config: ScatterConfig, bank: FilterBank,
                              threads: Optional[int] = None) -> ScatterConfig:
    """
    Estimate k_L1[j] and then k_L2[j] from training images

    Per image and scale the mean/median rule picks k over the config grid; the
    values are averaged over the sampled images. Resolutions share one k per scale.
    """
    grid = config.k_grid()
    sample = images[_sample_indices(len(images), config.k_sample_images)]

    def first_pass(image: np.ndarray) -> Dict[int, float]:
        samples: Dict[int, List[np.ndarray]] = {}
        for levels, resized in zip(config.scales, make_resolutions(image, config.resolution_factors)):
            for c in range(resized.shape[2]):
                for j, env in enumerate(first_layer_envelopes(resized[:, :, c], levels, bank), start=1):
                    if j < levels:
                        samples.setdefault(j, []).append(env)
        return _per_image_k(samples, grid)

    k_l1 = _average_k(parallel_map(first_pass, list(sample), threads))
    config = config.model_copy(update={'log_params_l1': {**config.log_params_l1, **k_l1}})
    logger.info(f"✓ k_L1 selected: {_format_k(k_l1)}")

    def second_pass(image: np.ndarray) -> Dict[int, float]:
        samples: Dict[int, List[np.ndarray]] = {}
        for levels, resized in zip(config.scales, make_resolutions(image, config.resolution_factors)):
            for c in range(resized.shape[2]):
                envelopes = first_layer_envelopes(resized[:, :, c], levels, bank)
                for j1 in range(1, levels):
                    u1 = apply_log(envelopes[j1 - 1], config.log_params_l1[j1])
                    for j2, env in _second_layer(u1, j1, levels, config, bank, log=False).items():
                        if j2 < levels:
                            samples.setdefault(j2, []).append(env)
        return _per_image_k(samples, grid)

    k_l2 = _average_k(parallel_map(second_pass, list(sample), threads))
    config = config.model_copy(update={'log_params_l2': {**config.log_params_l2, **k_l2}})
    logger.info(f"✓ k_L2 selected: {_format_k(k_l2)}")
    return config


def _average_k(per_image: List[Dict[int, float]]) -> Dict[int, float]:
    scales = sorted({j for ks in per_image for j in ks})
    return {j: float(np.mean([ks[j] for ks in per_image if j in ks])) for j in scales}


def _format_k(ks: Dict[int, float]) -> str:
    return ", ".join(f"j={j}: {k:.3f}" for j, k in sorted(ks.items()))


def symmetry_report(images: np.ndarray, config: ScatterConfig, bank: FilterBank,
                    limit: int = 0) -> Dict[int, Tuple[float, float]]:
    """
    Per first-layer scale: (|mean - median| of raw moduli, same after the parametric log)
    Gaps are averaged over at most limit evenly spaced images (0 keeps all); the
    coarsest scale of each resolution is skipped.
    """
    gaps: Dict[int, List[Tuple[float, float]]] = {}
    for image in images[_sample_indices(len(images), limit)]:
        for levels, resized in zip(config.scales, make_resolutions(image, config.resolution_factors)):
            per_scale: Dict[int, List[np.ndarray]] = {}
            for c in range(resized.shape[2]):
                for j, env in enumerate(first_layer_envelopes(resized[:, :, c], levels, bank), start=1):
                    if j < levels:
                        per_scale.setdefault(j, []).append(env.ravel())
            for j, parts in per_scale.items():
                raw = np.concatenate(parts)
                logged = apply_log(raw, _log_param(config.log_params_l1, j, 'L1'))
                gaps.setdefault(j, []).append((
                    abs(float(raw.mean() - np.median(raw))),
                    abs(float(logged.mean() - np.median(logged)))
                ))
    return {j: (float(np.mean([g[0] for g in v])), float(np.mean([g[1] for g in v])))
            for j, v in sorted(gaps.items())}
