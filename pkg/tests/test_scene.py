import numpy as np
import pytest

import ropes.scene as SC
from ropes.rng import stream


def simple_scene(**kw):
    defaults = dict(
        link_lengths=(1.0, 0.8, 0.6),
        rotation_axes=SC.default_axes(3, "in-plane"),
        views=(SC.ViewSpec(scale=5.9, center=(15.5, 15.5)),),
        link_radius=0.12,
    )
    defaults.update(kw)
    return SC.ArmScene(**defaults)


class TestViewSpec:
    def test_identity_projection(self):
        v = SC.ViewSpec(scale=1.0, center=(0.0, 0.0))
        px = v.project(np.array([[2.0, 5.0, 3.0]]))
        # x maps to column, z maps upward (negative row), y is depth
        np.testing.assert_allclose(px[0], [2.0, -3.0])

    def test_yaw_90_swaps_x_into_depth(self):
        v = SC.ViewSpec(yaw=90.0, scale=1.0, center=(0.0, 0.0))
        px = v.project(np.array([[1.0, 0.0, 0.0]]))
        np.testing.assert_allclose(px[0], [0.0, 0.0], atol=1e-12)

    def test_pitch_90_brings_y_into_rows(self):
        v = SC.ViewSpec(pitch=90.0, scale=1.0, center=(0.0, 0.0))
        px = v.project(np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_allclose(px[0], [0.0, -1.0], atol=1e-12)

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            SC.ViewSpec(scale=0.0)


class TestSceneValidation:
    def test_negative_length_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            simple_scene(link_lengths=(1.0, -0.5, 0.6))

    def test_axis_count_mismatch(self):
        with pytest.raises(ValueError, match="one rotation axis per link"):
            simple_scene(rotation_axes=SC.default_axes(2, "in-plane"))

    def test_non_unit_axis(self):
        with pytest.raises(ValueError, match="unit-norm"):
            simple_scene(rotation_axes=((0.0, 2.0, 0.0),) * 3)

    def test_workspace_overflow_rejected(self):
        with pytest.raises(ValueError, match="workspace"):
            simple_scene(views=(SC.ViewSpec(scale=12.0, center=(15.5, 15.5)),))

    def test_tiny_image_rejected(self):
        with pytest.raises(ValueError, match="16x16"):
            simple_scene(image_size=(8, 8))


class TestForwardKinematics:
    def test_zero_pose_is_straight_chain(self):
        sc = simple_scene()
        pts = SC.forward_kinematics(sc, np.zeros(3))
        np.testing.assert_allclose(pts[:, 0], [0.0, 1.0, 1.8, 2.4], atol=1e-15)
        np.testing.assert_allclose(pts[:, 1:], 0.0, atol=1e-15)

    def test_link_lengths_preserved(self):
        sc = simple_scene(rotation_axes=SC.default_axes(3, "alternating"))
        rng = stream(0, "fk")
        for _ in range(50):
            z = rng.uniform(-np.pi, np.pi, 3)
            pts = SC.forward_kinematics(sc, z)
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            np.testing.assert_allclose(seg, sc.link_lengths, rtol=1e-12)

    def test_first_angle_rotates_whole_arm(self):
        sc = simple_scene()
        a = SC.forward_kinematics(sc, np.array([0.3, 0.1, -0.2]))
        b = SC.forward_kinematics(sc, np.array([0.5, 0.1, -0.2]))
        rot = SC._rodrigues((0.0, 1.0, 0.0), 0.2)
        np.testing.assert_allclose(b, a @ rot.T, atol=1e-12)

    def test_wrong_angle_count(self):
        with pytest.raises(ValueError, match="expected 3 angles"):
            SC.forward_kinematics(simple_scene(), np.zeros(4))


class TestRenderPose:
    def test_deterministic(self):
        sc = simple_scene()
        z = np.array([0.4, -0.3, 0.9])
        a = SC.render_pose(sc, z, sc.views[0])
        b = SC.render_pose(sc, z, sc.views[0])
        np.testing.assert_array_equal(a, b)

    def test_range_and_shape(self):
        sc = simple_scene()
        img = SC.render_pose(sc, np.array([1.0, 0.5, -0.5]), sc.views[0])
        assert img.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert img.max() > 0.5  # the arm is actually visible

    def test_last_link_is_brightest(self):
        sc = simple_scene()
        assert sc.link_intensity(2) == pytest.approx(1.0)
        assert sc.link_intensity(0) < sc.link_intensity(1) < sc.link_intensity(2)

    def test_continuity_under_small_angle_change(self):
        # anti-aliasing keeps the image map Lipschitz in the pose
        sc = simple_scene()
        rng = stream(1, "cont")
        for _ in range(20):
            z = rng.uniform(-1.4, 1.4, 3)
            dz = rng.normal(size=3)
            dz *= 1e-3 / np.linalg.norm(dz)
            a = SC.render_pose(sc, z, sc.views[0])
            b = SC.render_pose(sc, z + dz, sc.views[0])
            assert np.abs(a - b).max() <= 0.1

    def test_out_of_bounds_pose_raises(self):
        # render under a view that was never validated against the workspace
        scene = simple_scene()
        rogue = SC.ViewSpec(scale=5.9, center=(2.0, 15.5))
        with pytest.raises(SC.RenderBoundsError):
            SC.render_pose(scene, np.array([np.pi, 0.0, 0.0]), rogue)

    def test_out_of_plane_rotation_changes_projection_length(self):
        # a single link rotating about the vertical axis forshortens
        sc = SC.ArmScene(
            link_lengths=(1.0,),
            rotation_axes=((0.0, 0.0, 1.0),),
            views=(SC.ViewSpec(scale=5.9, center=(15.5, 15.5)),),
            link_radius=0.12,
        )
        flat = SC.render_pose(sc, np.array([0.0]), sc.views[0])
        turned = SC.render_pose(sc, np.array([1.2]), sc.views[0])
        assert turned.sum() < flat.sum()


class TestOcclude:
    def test_patch_applied(self):
        img = np.zeros((32, 32))
        out = SC.occlude(img, (4, 6, 8), value=1.0)
        assert out[4:12, 6:14].min() == 1.0
        assert out.sum() == pytest.approx(64.0)
        assert img.sum() == 0.0  # original untouched

    def test_out_of_bounds_patch(self):
        with pytest.raises(ValueError, match="outside image bounds"):
            SC.occlude(np.zeros((32, 32)), (28, 28, 8))

    def test_negative_size(self):
        with pytest.raises(ValueError, match="non-negative"):
            SC.occlude(np.zeros((32, 32)), (0, 0, -1))


class TestInjectivity:
    def test_default_scene_injective(self):
        sc = simple_scene()
        rng = stream(2, "inj")
        poses = np.column_stack([
            rng.uniform(-1.5, 1.5, 200),
            rng.uniform(-1.5, 1.5, 200),
            rng.uniform(0.0, 3.0, 200),
        ])
        assert SC.check_injectivity(sc, poses, stream(2, "inj2")) == 0

    def test_degenerate_scene_warns(self):
        # zero-length view scale differences can't happen, so force failure by
        # comparing identical poses disguised as distinct via tiny threshold
        sc = simple_scene()
        poses = np.tile(np.array([0.2, 0.1, 1.0]), (10, 1))
        poses += stream(3, "eps").normal(0, 1e-6, poses.shape)
        with pytest.warns(UserWarning, match="indistinguishably"):
            n = SC.check_injectivity(sc, poses, stream(3, "inj"),
                                     min_angle_dist=0.0)
        assert n > 0


class TestDefaultAxes:
    def test_in_plane(self):
        assert SC.default_axes(2) == ((0.0, 1.0, 0.0), (0.0, 1.0, 0.0))

    def test_alternating(self):
        axes = SC.default_axes(3, "alternating")
        assert axes == ((0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def test_unknown_pattern(self):
        with pytest.raises(ValueError, match="pattern"):
            SC.default_axes(3, "spiral")
