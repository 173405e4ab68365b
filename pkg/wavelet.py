#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dual-tree complex wavelet front-end
Filter banks and the 2D forward DTCWT with six oriented complex subbands per scale
"""

import logging
from typing import Dict, List, Tuple, Union

import numpy as np
from dtcwt.coeffs import biort as load_biort, qshift as load_qshift
from dtcwt.numpy import Transform2d
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError, DimensionError, ValidationError

logger = logging.getLogger(__name__)

# Subband order of the transform output, degrees from horizontal
ORIENTATIONS: Tuple[int, ...] = (15, 45, 75, 105, 135, 165)

# family identifier -> (level-1 biorthogonal set, q-shift set)
FILTER_FAMILIES: Dict[str, Tuple[str, str]] = {
    'default': ('near_sym_b', 'qshift_b'),
    'near_sym_a': ('near_sym_a', 'qshift_a'),
    'legall': ('legall', 'qshift_a'),
    'antonini': ('antonini', 'qshift_06'),
}

LOWPASS_DC_GAIN = np.sqrt(2.0)


class FilterBank(BaseModel):
    """
    Analysis filters for both trees
    level1 = (h0o, g0o, h1o, g1o); qshift = (h0a, h0b, g0a, g0b, h1a, h1b, g1a, g1b)
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    family: str
    level1_name: str
    qshift_name: str
    level1: Tuple[np.ndarray, ...]
    qshift: Tuple[np.ndarray, ...]
    lengths: Dict[str, int] = Field(default_factory=dict)

    @model_validator(mode='after')
    def check_filters(self):
        if len(self.level1) != 4 or len(self.qshift) != 8:
            raise ValueError("level-1 set needs 4 arrays and q-shift set needs 8")
        for arr in self.level1 + self.qshift:
            if arr.size == 0 or not np.all(np.isfinite(arr)):
                raise ValueError("filter arrays must be non-empty and finite")
        h0o, _, h1o, _ = self.level1
        h0a, h0b, _, _, h1a, h1b, _, _ = self.qshift
        for low, high in ((h0o, h1o), (h0a, h1a), (h0b, h1b)):
            if low.shape == high.shape and np.allclose(low, high):
                raise ValueError("low-pass and high-pass filters must differ")
        return self

    @property
    def lowpass_filters(self) -> List[np.ndarray]:
        return [self.level1[0], self.qshift[0], self.qshift[1]]


class ComplexSubband(BaseModel):
    """One oriented subband; real part from tree a, imaginary part from tree b"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scale: int
    orientation: int
    data: np.ndarray


class WaveletPyramid(BaseModel):
    """
    Forward transform output: highpasses[j-1] is an h x w x 6 complex array
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lowpass: np.ndarray
    highpasses: List[np.ndarray]
    input_shape: Tuple[int, int]

    @property
    def levels(self) -> int:
        return len(self.highpasses)

    def subband(self, scale: int, orientation_index: int) -> ComplexSubband:
        return ComplexSubband(
            scale=scale,
            orientation=ORIENTATIONS[orientation_index],
            data=self.highpasses[scale - 1][:, :, orientation_index]
        )

    @property
    def subbands(self) -> List[ComplexSubband]:
        return [self.subband(j, r)
                for j in range(1, self.levels + 1)
                for r in range(len(ORIENTATIONS))]


def _normalize_lowpass(filters: Tuple[np.ndarray, ...], low_index: int,
                       analysis: Tuple[int, ...]) -> Tuple[np.ndarray, ...]:
    """Rescale analysis filters so the low-pass sums to sqrt(2); synthesis gets the inverse"""
    factor = LOWPASS_DC_GAIN / float(np.sum(filters[low_index]))
    return tuple(
        np.asarray(f, dtype=np.float64) * (factor if i in analysis else 1.0 / factor)
        for i, f in enumerate(filters)
    )


def build_filter_bank(spec: str = 'default') -> FilterBank:
    """
    Build the coefficient set for a filter family

    Args:
        spec: Family identifier, one of FILTER_FAMILIES

    Returns:
        FilterBank with every low-pass filter at DC gain sqrt(2)
    """
    if spec not in FILTER_FAMILIES:
        raise ConfigError(f"Unknown filter family '{spec}' (known: {', '.join(sorted(FILTER_FAMILIES))})")

    level1_name, qshift_name = FILTER_FAMILIES[spec]
    level1 = _normalize_lowpass(tuple(load_biort(level1_name)), 0, analysis=(0, 2))
    qshift = _normalize_lowpass(tuple(load_qshift(qshift_name)), 0, analysis=(0, 1, 4, 5))

    bank = FilterBank(
        family=spec,
        level1_name=level1_name,
        qshift_name=qshift_name,
        level1=level1,
        qshift=qshift,
        lengths={
            'h0o': level1[0].size, 'h1o': level1[2].size,
            'h0a': qshift[0].size, 'h1a': qshift[4].size
        }
    )
    logger.debug(f"Filter bank '{spec}': {level1_name} + {qshift_name} {bank.lengths}")
    return bank


def _check_finite(values: np.ndarray, what: str) -> None:
    if values.size == 0:
        raise ValidationError(f"{what} is empty")
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"{what} contains non-finite values")


def dtcwt_forward(channel: np.ndarray, levels: int, bank: FilterBank) -> WaveletPyramid:
    """
    Forward 2D DTCWT of one real channel with symmetric boundary extension

    Args:
        channel: Real 2D grid
        levels: Number of scales J >= 1
        bank: Analysis filters

    Returns:
        WaveletPyramid with 6 * J oriented subbands and the coarsest low-pass
    """
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ValidationError(f"Expected a 2D channel, got shape {channel.shape}")
    _check_finite(channel, "input channel")
    if levels < 1:
        raise DimensionError(f"levels must be >= 1, got {levels}")
    if min(channel.shape) < 2 ** levels:
        raise DimensionError(
            f"Channel {channel.shape[0]}x{channel.shape[1]} is too small for {levels} levels "
            f"(needs >= {2 ** levels} per side)"
        )

    transform = Transform2d(biort=bank.level1, qshift=bank.qshift)
    pyramid = transform.forward(channel, nlevels=levels, include_scale=False)

    return WaveletPyramid(
        lowpass=np.asarray(pyramid.lowpass),
        highpasses=[np.asarray(h) for h in pyramid.highpasses],
        input_shape=(int(channel.shape[0]), int(channel.shape[1]))
    )


def modulus(subband: Union[ComplexSubband, np.ndarray]) -> np.ndarray:
    """Point-wise complex modulus sqrt(re^2 + im^2)"""
    data = subband.data if isinstance(subband, ComplexSubband) else np.asarray(subband)
    if not np.all(np.isfinite(data)):
        raise ValidationError("subband contains non-finite values")
    return np.abs(data)
