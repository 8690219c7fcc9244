import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dualseg.wavelet import SubbandSet, db2_filters, detail_to_channel, dwt2, idwt2, vertical_details


def test_filter_identities():
    f = db2_filters()
    h, g = f.lowpass, f.highpass
    assert h.sum() == pytest.approx(np.sqrt(2), abs=1e-12)
    assert np.dot(h, h) == pytest.approx(1.0, abs=1e-12)
    assert np.dot(h[:2], h[2:]) == pytest.approx(0.0, abs=1e-12)  # shift-by-2 orthogonality
    assert np.dot(h, g) == pytest.approx(0.0, abs=1e-12)
    assert g.sum() == pytest.approx(0.0, abs=1e-12)
    # one vanishing moment beyond the mean
    assert np.dot(np.arange(4), g) == pytest.approx(0.0, abs=1e-12)


def test_filters_match_independent_values():
    np.testing.assert_allclose(db2_filters().lowpass, oracles.db2_lowpass(), atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_dwt2_matches_bruteforce_8x8(seed):
    img = np.random.default_rng(seed).standard_normal((8, 8))
    got = dwt2(img)
    ref = oracles.dwt2_bruteforce(img)
    for name in ("ll", "horizontal", "vertical", "diagonal"):
        np.testing.assert_allclose(getattr(got, name), ref[name], atol=1e-10, err_msg=name)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_perfect_reconstruction_and_energy(size):
    rng = np.random.default_rng(size)
    for _ in range(5):
        img = rng.standard_normal((size, size))
        bands = dwt2(img)
        np.testing.assert_allclose(idwt2(bands), img, atol=1e-10)
        energy = sum(np.sum(getattr(bands, b) ** 2) for b in ("ll", "horizontal", "vertical", "diagonal"))
        assert energy == pytest.approx(np.sum(img ** 2), abs=1e-8)


def test_constant_image_has_no_detail():
    bands = dwt2(np.full((16, 16), 3.0))
    np.testing.assert_allclose(bands.ll, 6.0, atol=1e-12)
    for b in (bands.horizontal, bands.vertical, bands.diagonal):
        np.testing.assert_allclose(b, 0.0, atol=1e-12)


def test_vertical_edge_lands_in_vertical_band():
    img = np.zeros((16, 16))
    img[:, 7:] = 1.0  # intensity changes across columns
    bands = dwt2(img)
    assert np.abs(bands.vertical).max() > 0.1
    np.testing.assert_allclose(bands.horizontal, 0.0, atol=1e-12)
    np.testing.assert_allclose(bands.diagonal, 0.0, atol=1e-12)


def test_odd_dims_extended_and_cropped():
    img = np.random.default_rng(3).standard_normal((9, 11))
    bands = dwt2(img)
    assert bands.ll.shape == (5, 6)
    np.testing.assert_allclose(idwt2(bands), img, atol=1e-10)


def test_dwt2_rejects_tiny_and_non_2d():
    with pytest.raises(ValueError):
        dwt2(np.zeros((3, 8)))
    with pytest.raises(ValueError):
        dwt2(np.zeros((2, 8, 8)))


def test_idwt2_rejects_mismatched_bands():
    z = np.zeros((4, 4))
    with pytest.raises(ValueError):
        idwt2(SubbandSet(z, z, np.zeros((4, 5)), z))


def test_vertical_details_levels_and_minimum():
    v1, v2 = vertical_details(np.random.default_rng(4).standard_normal((64, 64)))
    assert v1.shape == (32, 32) and v2.shape == (16, 16)
    with pytest.raises(ValueError):
        vertical_details(np.zeros((6, 6)))


def test_detail_to_channel_range_and_constant():
    out = detail_to_channel(np.random.default_rng(5).standard_normal((16, 16)))
    assert out.shape == (64, 64)
    assert out.min() == pytest.approx(0.0) and out.max() == pytest.approx(1.0)
    assert not detail_to_channel(np.full((16, 16), 2.5)).any()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(4, 24), st.integers(4, 24)), elements=st.floats(-1e3, 1e3)))
def test_reconstruction_property(img):
    np.testing.assert_allclose(idwt2(dwt2(img)), img, atol=1e-8)
