#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Tests for the DTCWT front-end: filter banks, pyramid shapes, linearity and modulus
"""

import sys

import numpy as np
import pytest

from _support import collect, run_tests

from errors import ConfigError, DimensionError, ValidationError
from wavelet import FILTER_FAMILIES, ORIENTATIONS, build_filter_bank, dtcwt_forward, modulus


def _subband_energy(pyramid, level):
    return np.sum(np.abs(pyramid.highpasses[level - 1]) ** 2, axis=(0, 1))


def test_lowpass_dc_gain_every_family():
    for family in FILTER_FAMILIES:
        bank = build_filter_bank(family)
        for low in bank.lowpass_filters:
            assert abs(np.sum(low) - np.sqrt(2)) < 1e-10, family


def test_default_family_provenance():
    bank = build_filter_bank('default')
    assert bank.level1_name == 'near_sym_b'
    assert bank.qshift_name == 'qshift_b'
    assert bank.lengths['h0o'] == 13 and bank.lengths['h1o'] == 19
    assert bank.lengths['h0a'] == 14


def test_unknown_family_is_config_error():
    with pytest.raises(ConfigError):
        build_filter_bank('haar2x')


def test_constant_image_has_no_oriented_energy():
    c = 3.0
    pyramid = dtcwt_forward(np.full((64, 64), c), 4, build_filter_bank())
    for h in pyramid.highpasses:
        assert np.max(np.abs(h)) < 1e-8 * c
    assert np.all(np.abs(pyramid.lowpass) > 0)


def test_subband_sizes_halve_per_level():
    pyramid = dtcwt_forward(np.random.default_rng(0).random((64, 64)), 5, build_filter_bank())
    assert [h.shape[:2] for h in pyramid.highpasses] == [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)]
    assert all(h.shape[2] == 6 for h in pyramid.highpasses)
    assert len(pyramid.subbands) == 6 * 5
    assert {sb.orientation for sb in pyramid.subbands} == set(ORIENTATIONS)


def test_linearity():
    rng = np.random.default_rng(1)
    x, y = rng.random((32, 32)), rng.random((32, 32))
    bank = build_filter_bank()
    combined = dtcwt_forward(2.5 * x - 0.7 * y, 3, bank)
    px, py = dtcwt_forward(x, 3, bank), dtcwt_forward(y, 3, bank)
    for hc, hx, hy in zip(combined.highpasses, px.highpasses, py.highpasses):
        np.testing.assert_allclose(hc, 2.5 * hx - 0.7 * hy, atol=1e-10)


def _grating(fx: int, fy: int, size: int = 64) -> np.ndarray:
    """Cosine with fx cycles along columns and fy cycles down the rows"""
    rows, cols = np.mgrid[0:size, 0:size]
    return np.cos(2 * np.pi * (fx * cols + fy * rows) / size)


def _fft_stripe_angle(image: np.ndarray) -> float:
    """Stripe orientation in degrees, counter-clockwise from horizontal with y pointing up"""
    spectrum = np.abs(np.fft.fft2(image))
    spectrum[0, 0] = 0.0
    fy, fx = np.unravel_index(np.argmax(spectrum), spectrum.shape)
    size = image.shape[0]
    fy = fy - size if fy > size // 2 else fy
    fx = fx - size if fx > size // 2 else fx
    return float((np.degrees(np.arctan2(-fy, fx)) + 90.0) % 180.0)


def _nearest_orientation(angle: float) -> int:
    distance = [min(abs(angle - o) % 180, 180 - abs(angle - o) % 180) for o in ORIENTATIONS]
    return int(np.argmin(distance))


# level-1 passband wave vectors (cycles per 64 pixels) for the 15..165 degree subbands
LEVEL1_GRATINGS = [(8, 24), (24, 24), (24, 8), (-24, 8), (-24, 24), (-8, 24)]


def test_each_orientation_subband_selects_its_grating():
    bank = build_filter_bank()
    for band, (fx, fy) in enumerate(LEVEL1_GRATINGS):
        grating = _grating(fx, fy)
        assert _nearest_orientation(_fft_stripe_angle(grating)) == band
        # interior only, clear of the boundary extension
        level1 = dtcwt_forward(grating, 1, bank).highpasses[0][6:-6, 6:-6]
        energy = np.sum(np.abs(level1) ** 2, axis=(0, 1))
        assert int(np.argmax(energy)) == band, f"{ORIENTATIONS[band]} deg grating: energies {energy.round(2)}"


def test_axis_aligned_grating_avoids_diagonal_pair():
    xx = np.arange(64)[None, :] * np.ones((64, 1))
    grating = np.sin(2 * np.pi * 0.35 * xx)
    energy = _subband_energy(dtcwt_forward(grating, 2, build_filter_bank()), 1)
    pairs = [energy[[0, 5]].sum(), energy[[1, 4]].sum(), energy[[2, 3]].sum()]
    assert pairs[2] > 0.8 * energy.sum()
    assert pairs[1] < 1e-6 * energy.sum()


def test_transpose_swaps_orientation_pairs():
    image = np.random.default_rng(2).random((32, 32))
    bank = build_filter_bank()
    for level in (1, 2):
        e = _subband_energy(dtcwt_forward(image, 2, bank), level)
        et = _subband_energy(dtcwt_forward(image.T, 2, bank), level)
        np.testing.assert_allclose(e[[0, 5]].sum(), et[[2, 3]].sum(), rtol=1e-8)
        np.testing.assert_allclose(e[[1, 4]].sum(), et[[1, 4]].sum(), rtol=1e-8)


def test_modulus_values():
    assert modulus(np.array([[3 + 4j]]))[0, 0] == 5.0
    zeros = modulus(np.zeros((4, 4), dtype=complex))
    assert zeros.shape == (4, 4) and not zeros.any()


def test_modulus_is_more_shift_stable_than_complex_coefficients():
    bank = build_filter_bank()
    for seed in range(10):
        image = np.random.default_rng(seed).random((32, 32))
        shifted = np.roll(image, 1, axis=1)
        a = dtcwt_forward(image, 2, bank).highpasses[1]
        b = dtcwt_forward(shifted, 2, bank).highpasses[1]
        assert np.linalg.norm(modulus(a) - modulus(b)) < np.linalg.norm(a - b)


def test_invalid_inputs():
    bank = build_filter_bank()
    bad = np.zeros((16, 16))
    bad[3, 3] = np.nan
    with pytest.raises(ValidationError):
        dtcwt_forward(bad, 2, bank)
    with pytest.raises(DimensionError):
        dtcwt_forward(np.zeros((8, 8)), 4, bank)
    with pytest.raises(DimensionError):
        dtcwt_forward(np.zeros((8, 8)), 0, bank)
    with pytest.raises(ValidationError):
        modulus(np.array([np.inf + 0j]))


def main():
    return run_tests("WAVELET TESTS", collect(globals()))


if __name__ == "__main__":
    sys.exit(main())
