import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meltmpc.toolpath import Covariates, SquarePathSpec, covariates_at, laser_pose, near_corner

SPEC = SquarePathSpec(side_length=40.0, track_width=1.5, layer_height=0.75,
                      num_layers=10, scan_speed=7.0, interlayer_dwell=1.0)


class TestLaserPose:
    def test_path_start(self):
        pose = laser_pose(SPEC, 0.0)
        np.testing.assert_allclose(pose.position[:2], [0.0, 0.0])
        assert pose.enabled
        assert pose.layer == 1
        assert pose.position[2] == pytest.approx(0.75)

    def test_mid_bottom_edge(self):
        pose = laser_pose(SPEC, 20.0 / 7.0)
        np.testing.assert_allclose(pose.position[:2], [20.0, 0.0], atol=1e-12)

    def test_lap_duration(self):
        assert SPEC.lap_time == pytest.approx(4 * 40 / 7)
        pose = laser_pose(SPEC, SPEC.lap_time - 1e-6)
        assert pose.enabled and pose.layer == 1
        pose = laser_pose(SPEC, SPEC.lap_time + 1e-6)
        assert not pose.enabled  # dwell after the lap

    def test_dwell_reports_next_layer(self):
        pose = laser_pose(SPEC, SPEC.lap_time + 0.5)
        assert not pose.enabled
        assert pose.layer == 2
        assert pose.position[2] == pytest.approx(1.5)
        np.testing.assert_allclose(pose.position[:2], [0.0, 0.0])

    def test_beyond_last_layer_disabled(self):
        pose = laser_pose(SPEC, SPEC.total_time + 100.0)
        assert not pose.enabled
        assert pose.layer == SPEC.num_layers
        assert pose.position[2] == pytest.approx(10 * 0.75)

    def test_counterclockwise_traversal(self):
        quarter = SPEC.lap_time / 4
        p1 = laser_pose(SPEC, 0.5 * quarter).position
        p2 = laser_pose(SPEC, 1.5 * quarter).position
        p3 = laser_pose(SPEC, 2.5 * quarter).position
        p4 = laser_pose(SPEC, 3.5 * quarter).position
        assert p1[1] == 0.0 and 0 < p1[0] < 40
        assert p2[0] == 40.0 and 0 < p2[1] < 40
        assert p3[1] == 40.0 and 0 < p3[0] < 40
        assert p4[0] == 0.0 and 0 < p4[1] < 40

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=0.0, max_value=SPEC.total_time))
    def test_speed_property(self, t):
        dt = 1e-7
        pose = laser_pose(SPEC, t)
        if not pose.enabled:
            return
        # skip samples straddling a corner or an on/off transition
        s = (SPEC.scan_speed * (t - (pose.layer - 1) * (SPEC.lap_time + SPEC.interlayer_dwell)))
        if min(s % SPEC.side_length, SPEC.side_length - s % SPEC.side_length) < 1e-3:
            return
        after = laser_pose(SPEC, t + dt)
        if not after.enabled:
            return
        speed = np.linalg.norm(after.position[:2] - pose.position[:2]) / dt
        assert speed == pytest.approx(SPEC.scan_speed, abs=1e-9 * SPEC.scan_speed + 1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(min_value=0.0, max_value=SPEC.total_time * 1.2))
    def test_layer_and_z_monotone(self, t):
        pose_a = laser_pose(SPEC, t)
        pose_b = laser_pose(SPEC, t + 0.37)
        assert pose_b.layer >= pose_a.layer
        assert pose_b.position[2] >= pose_a.position[2]


class TestCovariates:
    def test_origin_corner(self):
        cov = covariates_at(SPEC, (0.0, 0.0, 0.75))
        assert cov.d_x == 0.0 and cov.d_y == 0.0

    def test_mid_bottom_edge(self):
        cov = covariates_at(SPEC, (20.0, 0.0, 0.75))
        assert cov.d_x == 20.0 and cov.d_y == 0.0

    def test_right_edge_point(self):
        cov = covariates_at(SPEC, (40.0, 15.0, 0.75))
        assert cov.d_x == 0.0 and cov.d_y == 15.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(min_value=0.0, max_value=SPEC.total_time))
    def test_bounds_property(self, t):
        pose = laser_pose(SPEC, t)
        cov = covariates_at(SPEC, pose.position)
        assert 0.0 <= cov.d_x <= SPEC.side_length / 2
        assert 0.0 <= cov.d_y <= SPEC.side_length / 2


class TestNearCorner:
    def test_corner_true(self):
        assert near_corner(Covariates(0.0, 0.0, 0.75))

    def test_mid_edge_false(self):
        assert not near_corner(Covariates(20.0, 0.0, 0.75))

    def test_inside_threshold(self):
        assert near_corner(Covariates(1.5, 1.5, 0.75))

    def test_custom_threshold(self):
        assert not near_corner(Covariates(1.5, 1.5, 0.75), threshold=1.0)
