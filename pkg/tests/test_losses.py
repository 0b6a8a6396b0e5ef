import math

import numpy as np
import pytest

from hmatch.encoders import DemanderMode, GaussianSpec
from hmatch.errors import EmptyLossError
from hmatch.grid import GridGeometry, Heatmap, Keypoint, PoseInstance
from hmatch.losses import (GradientMode, TargetKind, check_gradients, finite_difference_gradients, gradient_suite,
                           matching_loss, mse_loss, random_instance, relative_error, target_values)
from hmatch.transport import SinkhornConfig

GEOMETRY = GridGeometry(width=6, height=6)


def single_pixel(col, row, geometry=GEOMETRY):
    values = np.zeros(geometry.shape)
    values[row, col] = 1.0
    return Heatmap(geometry, values)


@pytest.fixture(scope='class')
def two_joint_instance():
    return random_instance(GEOMETRY, n_joints=2, seed=4)


class TestMatchingLoss:

    def test_unique_plan(self):
        instance = PoseInstance(joints=[Keypoint(3.0, 4.0)], heatmaps=[single_pixel(0, 0)])
        report = matching_loss(instance, DemanderMode.NAIVE)
        assert math.isclose(report.total, 5.0, abs_tol=1e-9)
        assert report.per_joint.tolist() == [report.total]
        assert report.masked.tolist() == [False]

    def test_on_center_naive_equals_subpixel(self):
        instance = random_instance(GEOMETRY, seed=2)
        kp = Keypoint(2.0, 3.0)
        instance = PoseInstance(joints=[kp], heatmaps=instance.heatmaps)
        naive = matching_loss(instance, DemanderMode.NAIVE).total
        subpixel = matching_loss(instance, DemanderMode.SUBPIXEL).total
        assert math.isclose(naive, subpixel, abs_tol=1e-9)

    def test_total_sums_joints(self, two_joint_instance):
        report = matching_loss(two_joint_instance)
        singles = [matching_loss(PoseInstance(joints=[kp], heatmaps=[h])).total
                   for kp, h in zip(two_joint_instance.joints, two_joint_instance.heatmaps)]
        assert np.allclose(report.per_joint, singles, rtol=1e-12, atol=0)
        assert math.isclose(report.total, sum(singles), rel_tol=1e-12)

    def test_invisible_joint_masked(self, two_joint_instance):
        joints = [two_joint_instance.joints[0], Keypoint(1.0, 1.0, visible=False)]
        report = matching_loss(PoseInstance(joints=joints, heatmaps=two_joint_instance.heatmaps))
        assert report.masked.tolist() == [False, True]
        assert report.per_joint[1] == 0.0
        assert report.total == report.per_joint[0]
        assert not np.any(report.gradients[1])
        assert np.any(report.gradients[0])

    def test_degenerate_joint_masked(self, two_joint_instance, caplog):
        heatmaps = [two_joint_instance.heatmaps[0], Heatmap(GEOMETRY, -np.ones(GEOMETRY.shape))]
        with caplog.at_level('WARNING', logger='hmatch.losses'):
            report = matching_loss(PoseInstance(joints=two_joint_instance.joints, heatmaps=heatmaps))
        assert report.masked.tolist() == [False, True]
        assert report.total == report.per_joint[0]
        assert not np.any(report.gradients[1])
        assert 'joint 1' in caplog.text

    def test_all_invisible(self):
        instance = PoseInstance(joints=[Keypoint(1.0, 1.0, visible=False)], heatmaps=[single_pixel(0, 0)])
        with pytest.raises(EmptyLossError):
            matching_loss(instance)

    def test_all_degenerate(self):
        instance = PoseInstance(joints=[Keypoint(1.0, 1.0)], heatmaps=[Heatmap.zeros(GEOMETRY)])
        with pytest.raises(EmptyLossError):
            matching_loss(instance)

    def test_negative_entries_have_no_gradient(self, two_joint_instance):
        report = matching_loss(two_joint_instance)
        for heatmap, grad in zip(two_joint_instance.heatmaps, report.gradients):
            assert not np.any(grad[heatmap.values < 0])

    def test_scale_invariant(self, two_joint_instance):
        scaled = PoseInstance(joints=two_joint_instance.joints,
                              heatmaps=[Heatmap(GEOMETRY, 3.0 * h.values) for h in two_joint_instance.heatmaps])
        assert math.isclose(matching_loss(scaled).total, matching_loss(two_joint_instance).total, rel_tol=1e-10)

    def test_report_dict(self, two_joint_instance):
        d = matching_loss(two_joint_instance).to_dict()
        assert set(d) == {'per_joint', 'total', 'masked'}
        assert d['masked'] == [False, False]

    @pytest.mark.parametrize('mode', [DemanderMode.SUBPIXEL, DemanderMode.NAIVE])
    def test_outside_joint_is_clamped(self, mode):
        outside = PoseInstance(joints=[Keypoint(5.6, 2.0)], heatmaps=[single_pixel(3, 2)])
        edge = PoseInstance(joints=[Keypoint(5.0, 2.0)], heatmaps=[single_pixel(3, 2)])
        assert math.isclose(matching_loss(outside, mode).total, 2.0, abs_tol=1e-9)
        assert math.isclose(matching_loss(outside, mode).total, matching_loss(edge, mode).total, abs_tol=1e-12)

    def test_no_tensor_conversion_warning(self, two_joint_instance, recwarn):
        matching_loss(two_joint_instance)
        assert not [w for w in recwarn if issubclass(w.category, UserWarning)]


class TestGradients:

    def test_against_finite_differences(self):
        checks = gradient_suite(GridGeometry(width=5, height=5), trials=3, seed=7)
        assert len(checks) == 3
        for check in checks:
            assert check.against == 'finite-difference'
            assert check.relative_error <= 1e-4

    def test_naive_against_finite_differences(self):
        check = check_gradients(random_instance(GridGeometry(width=4, height=5), seed=1), DemanderMode.NAIVE)
        assert check.relative_error <= 1e-4

    def test_unrolled_matches_implicit_at_convergence(self):
        checks = gradient_suite(GEOMETRY, trials=3, against='implicit', seed=5)
        for check in checks:
            assert check.relative_error <= 1e-5

    def test_implicit_loss_value(self, two_joint_instance):
        unrolled = matching_loss(two_joint_instance, gradient=GradientMode.UNROLLED)
        implicit = matching_loss(two_joint_instance, gradient='implicit')
        assert unrolled.total == implicit.total
        assert relative_error(unrolled.gradients, implicit.gradients)[0] <= 1e-5

    def test_unknown_reference(self, two_joint_instance):
        with pytest.raises(ValueError):
            check_gradients(two_joint_instance, against='symbolic')

    def test_short_unroll_differs_from_implicit(self):
        cfg = SinkhornConfig(lam=5.0, iterations=2)
        check = check_gradients(random_instance(GEOMETRY, seed=3), cfg=cfg, against='implicit')
        assert check.relative_error > 1e-5


class TestMseLoss:
    kp = Keypoint(2.4, 3.6)

    @pytest.mark.parametrize('target', [TargetKind.GAUSSIAN, TargetKind.DOT])
    def test_zero_at_target(self, target):
        values = target_values(self.kp, GEOMETRY, target)
        report = mse_loss(PoseInstance(joints=[self.kp], heatmaps=[Heatmap(GEOMETRY, values)]), target)
        assert report.total == 0.0
        assert not np.any(report.gradients[0])

    def test_dot_value(self):
        report = mse_loss(PoseInstance(joints=[self.kp], heatmaps=[Heatmap.zeros(GEOMETRY)]), 'dot')
        assert report.total == 1.0
        assert report.gradients[0][4, 2] == -2.0

    def test_gradients_match_finite_differences(self, two_joint_instance):
        spec = GaussianSpec(sigma=1.5)
        report = mse_loss(two_joint_instance, TargetKind.GAUSSIAN, spec)
        reference = finite_difference_gradients(two_joint_instance, loss='mse', target=TargetKind.GAUSSIAN, spec=spec)
        assert relative_error(report.gradients, reference)[0] <= 1e-8

    def test_invisible_masked(self):
        joints = [self.kp, Keypoint(0.0, 0.0, visible=False)]
        report = mse_loss(PoseInstance(joints=joints, heatmaps=[Heatmap.zeros(GEOMETRY)] * 2), 'dot')
        assert report.masked.tolist() == [False, True]
        assert report.total == 1.0

    def test_all_invisible(self):
        instance = PoseInstance(joints=[Keypoint(0.0, 0.0, visible=False)], heatmaps=[Heatmap.zeros(GEOMETRY)])
        with pytest.raises(EmptyLossError):
            mse_loss(instance)
