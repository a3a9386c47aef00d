"""Leg linkage kinematics and synthesis tests."""

import math

import numpy as np
import pytest

from wipbot import linkage as lk
from wipbot.errors import AssemblyError, OptimizationError


def sweep_xz(design, n=1000):
    path = lk.sweep_path(design, n)
    return path[:, 1], path[:, 2]


class TestForwardKinematics:
    def test_degenerate_pivot_on_hip_traces_circle(self):
        # rocker anchored on the hip axis with the attachment at the
        # wheel: the wheel is pinned at rocker length from the hip, so
        # the path is a circle of that radius whatever the thigh does
        des = lk.LinkageDesign(thigh=0.20, shank=0.30, attach_frac=1.0,
                               rocker=0.25, pivot_x=0.0, pivot_z=0.0,
                               hip_range=(-2.5, 2.5))
        for a in np.linspace(-2.5, 2.5, 50):
            pose = lk.forward_kinematics(des, a)
            assert math.hypot(*pose.wheel_center) == pytest.approx(0.25,
                                                                   abs=1e-12)

    def test_solved_pose_satisfies_all_bar_lengths(self):
        des = lk.DEFAULT_DESIGN
        for a in np.linspace(*des.hip_range, 17):
            res = lk.loop_residuals(des, a)
            assert np.all(np.abs(res) < 1e-12)

    def test_unassemblable_angle_raises(self):
        # rocker far too short to reach the attachment circle
        des = lk.LinkageDesign(thigh=0.20, shank=0.30, attach_frac=0.5,
                               rocker=0.02, pivot_x=0.25, pivot_z=-0.25,
                               hip_range=(0.0, 1.0))
        with pytest.raises(AssemblyError):
            lk.forward_kinematics(des, 0.5)

    def test_joint_positions_consistent_with_pose(self):
        des = lk.DEFAULT_DESIGN
        a = 1.0
        joints = lk.joint_positions(des, a)
        pose = lk.forward_kinematics(des, a)
        assert joints["wheel"] == pytest.approx(pose.wheel_center)
        assert math.hypot(*joints["knee"]) == pytest.approx(des.thigh)

    def test_default_design_wheel_stays_near_target_line(self):
        # dense sweep: worst x-deviation from the vertical target line
        xs, _ = sweep_xz(lk.DEFAULT_DESIGN)
        assert np.abs(xs - lk.DEFAULT_TARGET_X).max() < 0.005

    def test_default_design_total_height_endpoints(self):
        body = lk.DEFAULT_BODY
        lo, hi = lk.DEFAULT_DESIGN.hip_range
        heights = []
        for a in (lo, hi):
            pose = lk.forward_kinematics(lk.DEFAULT_DESIGN, a)
            heights.append(body.torso_top_z + body.wheel_radius
                           - pose.wheel_center[1])
        assert sorted(heights) == pytest.approx([0.31, 0.66], abs=1e-4)

    def test_h_strictly_monotone_over_stroke(self):
        path = lk.sweep_path(lk.DEFAULT_DESIGN, 1000)
        dh = np.diff(path[:, 3])
        assert np.all(dh < 0) or np.all(dh > 0)


class TestStraightnessError:
    def test_exact_line_gives_zero(self, monkeypatch):
        # synthetic straight-slider stand-in: kinematics replaced by a
        # perfect vertical line so only the metric itself is exercised
        def fake_sweep(params, alphas):
            n = len(alphas)
            wx = np.full((params.shape[0], n), -0.07)
            wz = np.tile(np.linspace(-0.4, -0.1, n), (params.shape[0], 1))
            return wx, wz

        monkeypatch.setattr(lk, "_batch_sweep", fake_sweep)
        err = lk.straightness_error(lk.DEFAULT_DESIGN, -0.07, 50)
        assert err == 0.0

    def test_matches_direct_computation(self):
        des = lk.DEFAULT_DESIGN
        n = 137
        lo, hi = des.hip_range
        xs = np.array([lk.forward_kinematics(des, a).wheel_center[0]
                       for a in np.linspace(lo, hi, n)])
        expect = float(np.mean((xs - lk.DEFAULT_TARGET_X) ** 2))
        assert lk.straightness_error(des, lk.DEFAULT_TARGET_X, n) == \
            pytest.approx(expect, rel=1e-12)

    def test_default_design_meets_mse_budget(self):
        err = lk.straightness_error(lk.DEFAULT_DESIGN, lk.DEFAULT_TARGET_X,
                                    1000)
        assert err < 1e-5

    def test_unassemblable_design_returns_inf(self):
        des = lk.LinkageDesign(thigh=0.20, shank=0.30, attach_frac=0.5,
                               rocker=0.02, pivot_x=0.25, pivot_z=-0.25,
                               hip_range=(0.0, 1.0))
        assert lk.straightness_error(des, 0.0, 20) == math.inf


class TestOptimize:
    def test_never_worse_than_initial(self):
        rng = np.random.default_rng(3)
        jitter = lk.DEFAULT_DESIGN.as_array() * (1 + 0.05 * rng.standard_normal(6))
        initial = lk.LinkageDesign.from_array(
            jitter, hip_range=lk.DEFAULT_DESIGN.hip_range)
        before = lk.straightness_error(initial, lk.DEFAULT_TARGET_X, 25)
        out = lk.optimize(initial, lk.DEFAULT_BOUNDS, lk.DEFAULT_TARGET_X,
                          restarts=2, seed=1)
        after = lk.straightness_error(out, lk.DEFAULT_TARGET_X, 25)
        assert after <= before

    def test_deterministic_given_seed(self):
        initial = lk.DEFAULT_DESIGN
        a = lk.optimize(initial, lk.DEFAULT_BOUNDS, lk.DEFAULT_TARGET_X,
                        restarts=2, seed=7)
        b = lk.optimize(initial, lk.DEFAULT_BOUNDS, lk.DEFAULT_TARGET_X,
                        restarts=2, seed=7)
        assert np.array_equal(a.as_array(), b.as_array())

    def test_infeasible_bounds_raise(self):
        tiny = ((1e-6, 2e-6),) * 4 + ((-1e-6, 1e-6), (-1e-6, 1e-6))
        with pytest.raises(OptimizationError):
            lk.optimize(lk.DEFAULT_DESIGN, tiny, 0.0, restarts=2, seed=0)

    def test_result_stays_in_bounds(self):
        out = lk.optimize(lk.DEFAULT_DESIGN, lk.DEFAULT_BOUNDS,
                          lk.DEFAULT_TARGET_X, restarts=2, seed=5)
        for v, (lob, hib) in zip(out.as_array(), lk.DEFAULT_BOUNDS):
            assert lob - 1e-12 <= v <= hib + 1e-12


class TestCompositeBody:
    def test_mass_constant_over_stroke(self):
        des = lk.DEFAULT_DESIGN
        masses = {round(lk.composite_body(des, a).mass, 12)
                  for a in np.linspace(*des.hip_range, 9)}
        assert len(masses) == 1

    def test_pendulum_arm_shrinks_when_crouching(self):
        des = lk.DEFAULT_DESIGN
        lo, hi = des.hip_range
        l_ext = lk.composite_body(des, lo).length
        l_crouch = lk.composite_body(des, hi).length
        assert l_crouch < l_ext

    def test_inertia_positive_and_bounded(self):
        des = lk.DEFAULT_DESIGN
        for a in np.linspace(*des.hip_range, 9):
            cb = lk.composite_body(des, a)
            assert 0 < cb.i_pitch < 1.0
            assert 0 < cb.i_yaw < 1.0


class TestHeightInverse:
    def test_roundtrip_within_band(self):
        des = lk.DEFAULT_DESIGN
        for h in (0.20, 0.30, 0.45):
            a = lk.hip_angle_for_height(des, h)
            assert lk.composite_body(des, a).h == pytest.approx(h, abs=1e-9)

    def test_out_of_band_clamps_to_stroke_ends(self):
        des = lk.DEFAULT_DESIGN
        lo, hi = des.hip_range
        h_lo = lk.composite_body(des, lo).h
        h_hi = lk.composite_body(des, hi).h
        a_big = lk.hip_angle_for_height(des, max(h_lo, h_hi) + 0.2)
        a_small = lk.hip_angle_for_height(des, min(h_lo, h_hi) - 0.2)
        assert {a_big, a_small} == {lo, hi}


class TestSerialization:
    def test_dict_roundtrip(self):
        d = lk.DEFAULT_DESIGN.to_dict()
        back = lk.LinkageDesign.from_dict(d)
        assert back == lk.DEFAULT_DESIGN

    def test_validation_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            lk.LinkageDesign(thigh=-0.1, shank=0.3, attach_frac=0.5,
                             rocker=0.3, pivot_x=0.0, pivot_z=-0.1)
        with pytest.raises(ValueError):
            lk.LinkageDesign(thigh=0.1, shank=0.3, attach_frac=1.5,
                             rocker=0.3, pivot_x=0.0, pivot_z=-0.1)
        with pytest.raises(ValueError):
            lk.LinkageDesign(thigh=0.1, shank=0.3, attach_frac=0.5,
                             rocker=0.3, pivot_x=0.0, pivot_z=-0.1,
                             hip_range=(1.0, 0.5))

    def test_assembles_over_range_helper(self):
        assert lk.assembles_over_range(lk.DEFAULT_DESIGN)
        bad = lk.LinkageDesign(thigh=0.20, shank=0.30, attach_frac=0.5,
                               rocker=0.02, pivot_x=0.25, pivot_z=-0.25,
                               hip_range=(0.0, 1.0))
        assert not lk.assembles_over_range(bad)
