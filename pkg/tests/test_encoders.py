import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import tests.data.expected.roundtrip as roundtrip
from hmatch.encoders import (DemanderMode, GaussianSpec, PeakConvention, build_demanders, build_demanders_naive,
                             build_demanders_subpixel, build_dot_heatmap, build_gaussian_heatmap, build_suppliers,
                             relu_normalize, subpixel_block)
from hmatch.errors import EncodingError
from hmatch.grid import GridGeometry, Heatmap, Keypoint, clamp_keypoint


@st.composite
def clamped_keypoints(draw, geometry):
    x = draw(st.floats(0.0, geometry.max_x))
    y = draw(st.floats(0.0, geometry.max_y))
    return Keypoint(x, y)


class TestSuppliers:

    @pytest.mark.parametrize('values,masses,degenerate', [
        ([1.0, -1.0, 1.0, 1.0], [1 / 3, 0.0, 1 / 3, 1 / 3], False),
        ([-5.0, -5.0, -5.0, -5.0], [0.25, 0.25, 0.25, 0.25], True),
        ([0.0, 0.0, 0.0, 1e-13], [0.25, 0.25, 0.25, 0.25], True),
        ([0.0, 2.0, 0.0, 6.0], [0.0, 0.25, 0.0, 0.75], False),
    ])
    def test_relu_normalize(self, values, masses, degenerate):
        result, flag = relu_normalize(np.array(values))
        assert np.allclose(result, masses, rtol=0, atol=1e-15)
        assert flag is degenerate

    def test_build_suppliers(self):
        geometry = GridGeometry(width=2, height=2, pixel_size=0.5)
        suppliers = build_suppliers(Heatmap(geometry, [[1.0, -1.0], [1.0, 1.0]]))
        assert len(suppliers) == 4
        assert not suppliers.degenerate
        assert suppliers.locations.tolist() == [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5], [0.5, 0.5]]

    def test_degenerate_logged(self, caplog):
        geometry = GridGeometry(width=2, height=2)
        with caplog.at_level('WARNING', logger='hmatch.encoders'):
            suppliers = build_suppliers(Heatmap(geometry, -np.ones((2, 2))))
        assert suppliers.degenerate
        assert 'uniform' in caplog.text

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4))
    def test_masses_are_distribution(self, values):
        masses, _ = relu_normalize(np.array(values))
        assert np.all(masses >= 0)
        assert math.isclose(masses.sum(), 1.0, abs_tol=1e-12)


class TestSubpixelDemanders:
    geometry = GridGeometry(width=4, height=5)

    def test_bilinear_masses(self):
        demanders = build_demanders_subpixel(Keypoint(*roundtrip.decoded), self.geometry)
        assert demanders.masses.tolist() == roundtrip.masses
        assert demanders.locations.tolist() == roundtrip.locations
        assert tuple(demanders.mean()) == roundtrip.decoded

    @pytest.mark.parametrize('x,y,block', [
        (0.0, 0.0, (0, 0)),
        (3.0, 4.0, (2, 3)),
        (1.999, 2.0, (1, 2)),
        (2.5, 0.5, (2, 0)),
    ])
    def test_block(self, x, y, block):
        assert subpixel_block(Keypoint(x, y), self.geometry) == block

    def test_on_center_matches_naive(self):
        kp = Keypoint(2.0, 1.0)
        subpixel = build_demanders_subpixel(kp, self.geometry)
        naive = build_demanders_naive(kp, self.geometry)
        support = subpixel.locations[subpixel.masses > 0]
        assert subpixel.masses[subpixel.masses > 0].tolist() == naive.masses.tolist()
        assert support.tolist() == naive.locations.tolist()

    @settings(max_examples=500)
    @given(st.data(), st.sampled_from([0.25, 0.5, 1.0, 2.0]))
    def test_mass_and_mean(self, data, pixel_size):
        geometry = GridGeometry(width=6, height=5, pixel_size=pixel_size)
        kp = data.draw(clamped_keypoints(geometry))
        demanders = build_demanders_subpixel(kp, geometry)
        assert len(demanders) == 4
        assert np.all((demanders.masses >= 0) & (demanders.masses <= 1))
        assert math.isclose(demanders.masses.sum(), 1.0, abs_tol=1e-12)
        mx, my = demanders.mean()
        assert abs(mx - kp.x) <= 1e-9 and abs(my - kp.y) <= 1e-9

    @given(st.floats(-20, 20), st.floats(-20, 20))
    def test_outside_dot_is_clamped(self, x, y):
        demanders = build_demanders_subpixel(Keypoint(x, y), self.geometry)
        kp = clamp_keypoint(Keypoint(x, y), self.geometry)
        assert math.isclose(demanders.masses.sum(), 1.0, abs_tol=1e-12)
        mx, my = demanders.mean()
        assert abs(mx - kp.x) <= 1e-9 and abs(my - kp.y) <= 1e-9

    @pytest.mark.parametrize('x,y,masses,origin', [
        (-0.3, 2.0, [1.0, 0.0, 0.0, 0.0], [0.0, 2.0]),
        (3.6, 4.6, [0.0, 0.0, 0.0, 1.0], [2.0, 3.0]),
        (1.5, -7.0, [0.5, 0.5, 0.0, 0.0], [1.0, 0.0]),
    ])
    def test_outside_dot_masses(self, x, y, masses, origin):
        demanders = build_demanders_subpixel(Keypoint(x, y), self.geometry)
        assert demanders.masses.tolist() == masses
        assert demanders.locations[0].tolist() == origin

    def test_invisible(self):
        with pytest.raises(EncodingError) as info:
            build_demanders_subpixel(Keypoint(1.0, 1.0, visible=False), self.geometry, joint=3)
        assert info.value.joint == 3
        assert 'joint 3' in str(info.value)


class TestNaiveDemanders:
    geometry = GridGeometry(width=4, height=5, pixel_size=2.0)

    @pytest.mark.parametrize('x,y,location', [
        (3.2, 0.8, [4.0, 0.0]),
        (1.0, 1.0, [0.0, 0.0]),
        (6.0, 8.0, [6.0, 8.0]),
    ])
    def test_containing_center(self, x, y, location):
        demanders = build_demanders(Keypoint(x, y), self.geometry, mode='naive')
        assert demanders.masses.tolist() == [1.0]
        assert demanders.locations.tolist() == [location]

    def test_mode_dispatch(self):
        kp = Keypoint(3.2, 0.8)
        assert len(build_demanders(kp, self.geometry, DemanderMode.SUBPIXEL)) == 4
        assert len(build_demanders(kp, self.geometry, DemanderMode.NAIVE)) == 1
        with pytest.raises(ValueError):
            build_demanders(kp, self.geometry, mode='bilinear')


class TestTargetHeatmaps:
    geometry = GridGeometry(width=9, height=7)

    def test_peak_one(self):
        heatmap = build_gaussian_heatmap(Keypoint(3.3, 2.6), self.geometry, GaussianSpec(sigma=2.0))
        assert heatmap.values[3, 3] == 1.0
        assert heatmap.values.max() == 1.0
        assert math.isclose(heatmap.values[3, 4], math.exp(-1 / 8), rel_tol=1e-12)

    def test_subpixel_convention(self):
        spec = GaussianSpec(sigma=1.0, peak_convention='sub-pixel')
        assert spec.peak_convention is PeakConvention.SUBPIXEL
        heatmap = build_gaussian_heatmap(Keypoint(3.5, 2.0), self.geometry, spec)
        assert heatmap.values.max() < 1.0
        assert heatmap.values[2, 3] == heatmap.values[2, 4]

    def test_dot(self):
        heatmap = build_dot_heatmap(Keypoint(3.3, 2.6), self.geometry)
        assert heatmap.values.sum() == 1.0
        assert heatmap.values[3, 3] == 1.0

    @pytest.mark.parametrize('sigma', [0.0, -1.0])
    def test_invalid_sigma(self, sigma):
        with pytest.raises(ValueError):
            GaussianSpec(sigma=sigma)

    def test_invisible(self):
        with pytest.raises(EncodingError):
            build_dot_heatmap(Keypoint(1.0, 1.0, visible=False), self.geometry)
