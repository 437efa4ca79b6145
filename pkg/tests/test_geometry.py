import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mddn.errors import ConfigError, InputError
from mddn.geometry import (DistortionMap, PlaneCoord, SphericalCoord, check_projection, distortion_batch,
                           distortion_map, erp_project, erp_stretch, erp_unproject, jacobian_stretch)


def direct_weight(h_global, full_height):
    return math.cos((h_global + 0.5 - full_height / 2) * math.pi / full_height)


def test_project_examples():
    assert erp_project(SphericalCoord(0.3, -0.2)) == PlaneCoord(0.3, -0.2)
    assert erp_project(SphericalCoord(0.0, 0.0)) == PlaneCoord(0.0, 0.0)
    assert erp_unproject(erp_project(SphericalCoord(1.1, 0.7))) == SphericalCoord(1.1, 0.7)


@pytest.mark.parametrize("theta,phi", [(math.pi, 0.0), (-math.pi, 0.0), (0.0, math.pi / 2), (0.0, -2.0)])
def test_project_rejects_boundary(theta, phi):
    with pytest.raises(InputError):
        erp_project(SphericalCoord(theta, phi))
    with pytest.raises(InputError):
        erp_unproject(PlaneCoord(theta, phi))


@given(st.floats(-3.14159, 3.14159), st.floats(-1.5707, 1.5707))
def test_round_trip(theta, phi):
    back = erp_unproject(erp_project(SphericalCoord(theta, phi)))
    assert abs(back.theta - theta) <= 1e-12 and abs(back.phi - phi) <= 1e-12


def test_stretch_examples():
    assert jacobian_stretch(0.0, 1.0) == 1.0
    assert jacobian_stretch(math.pi / 3, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert jacobian_stretch(math.pi / 4, 2.0) == pytest.approx(0.35355339, abs=1e-8)
    for bad in (0.0, -1.0):
        with pytest.raises(InputError):
            jacobian_stretch(0.1, bad)


@given(st.floats(-1.57, 1.57))
def test_stretch_unit_jacobian_is_cos(phi):
    assert jacobian_stretch(phi, 1.0) == pytest.approx(math.cos(phi), abs=1e-15)


def test_erp_numerical_jacobian_is_unit():
    for phi in (-1.2, 0.0, 0.4):
        assert erp_stretch(0.5, phi) == pytest.approx(math.cos(phi), abs=1e-8)


def test_only_erp_supported():
    assert check_projection("erp") == "erp"
    with pytest.raises(ConfigError):
        check_projection("cubemap")


def test_distmap_examples():
    np.testing.assert_allclose(distortion_map(4, 1, 0, 4).rows, [0.38268343, 0.92387953, 0.92387953, 0.38268343],
                               atol=1e-8)
    np.testing.assert_allclose(distortion_map(2, 1, 1, 4).rows, [0.92387953, 0.92387953], atol=1e-8)


@pytest.mark.parametrize("height,width,row_offset,full", [(3, 2, 2, 4), (0, 2, 0, 4), (2, 0, 0, 4), (2, 2, -1, 4)])
def test_distmap_rejects_bad_windows(height, width, row_offset, full):
    with pytest.raises(InputError):
        distortion_map(height, width, row_offset, full)


@pytest.mark.parametrize("H", [1, 2, 5, 64, 333])
def test_distmap_matches_direct_evaluation(H):
    dm = distortion_map(H, 3)
    expect = np.array([[direct_weight(h, H)] * 3 for h in range(H)])
    assert np.max(np.abs(dm.values - expect)) <= 1e-12
    assert np.all(dm.values[::-1] == dm.values)
    assert np.all((dm.values > 0) & (dm.values <= 1))
    peak = {(H - 1) // 2, H // 2}
    assert {int(i) for i in np.flatnonzero(dm.rows == dm.rows.max())} <= peak


@settings(max_examples=100)
@given(st.integers(1, 200), st.data())
def test_patch_consistency(H, data):
    a = data.draw(st.integers(0, H - 1))
    k = data.draw(st.integers(1, H - a))
    full = distortion_map(H, 4, 0, H).values
    crop = distortion_map(k, 4, a, H).values
    assert np.array_equal(full[a : a + k], crop)


@given(st.integers(2, 300))
def test_monotone_in_latitude(H):
    rows = distortion_map(H, 1).rows
    dist = np.abs(np.arange(H) + 0.5 - H / 2)
    order = np.argsort(dist, kind="stable")
    assert np.all(np.diff(rows[order]) <= 1e-15)


def test_map_is_read_only():
    dm = distortion_map(4, 2)
    assert isinstance(dm, DistortionMap)
    with pytest.raises(ValueError):
        dm.values[0, 0] = 2.0


def test_batch_per_item_offsets():
    b = distortion_batch(2, 3, [0, 2], 4, batch=2)
    assert b.shape == (2, 1, 2, 3)
    np.testing.assert_array_equal(b[1, 0], distortion_map(2, 3, 2, 4).values)
    with pytest.raises(InputError):
        distortion_batch(2, 3, [0, 1, 2], 4, batch=2)
