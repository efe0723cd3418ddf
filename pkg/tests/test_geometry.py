import numpy as np
import pytest

from pixelbox.errors import NonPositiveDepth, NonPositiveInput, VirtualDepthNotConverted
from pixelbox.geometry import (
    CUBE_TEMPLATE,
    Corner3DSet,
    CornerSet,
    Cuboid,
    Intrinsics,
    LetterboxTransform,
    canonical_permutation,
    canonicalize_image_order,
    cube_prior,
    cuboid_to_corners,
    letterbox_points,
    project_corners,
    unproject_corners,
    virtual_depth_convert,
)

K = Intrinsics(fx=500.0, fy=500.0, cx=256.0, cy=256.0)


def sorted_rows(a):
    return a[np.lexsort((a[:, 2], a[:, 1], a[:, 0]))]


class TestCuboidToCorners:
    def test_unit_cube_at_origin(self):
        c = Cuboid(center=np.zeros(3), size=np.ones(3), rotation=np.eye(3))
        corners = cuboid_to_corners(c).xyz
        assert np.array_equal(corners, CUBE_TEMPLATE)
        assert np.all(np.abs(corners) == 0.5)

    def test_translation(self):
        c = Cuboid(center=np.array([1.0, 2.0, 3.0]), size=np.full(3, 2.0), rotation=np.eye(3))
        corners = cuboid_to_corners(c).xyz
        assert np.allclose(np.sort(corners[:, 0]), [0, 0, 0, 0, 2, 2, 2, 2])
        assert np.allclose(corners.mean(axis=0), [1, 2, 3])

    def test_rotation_z90_same_vertex_set(self):
        rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        a = cuboid_to_corners(Cuboid(np.zeros(3), np.ones(3), np.eye(3))).xyz
        b = cuboid_to_corners(Cuboid(np.zeros(3), np.ones(3), rot)).xyz
        assert np.allclose(sorted_rows(a), sorted_rows(b), atol=1e-12)


class TestProjection:
    def test_on_axis_point(self):
        c3d = Corner3DSet(np.tile([0.0, 0.0, 2.0], (8, 1)))
        cs = project_corners(c3d, K)
        assert np.allclose(cs.uv, [[256, 256]] * 8)
        assert np.allclose(cs.depths, 2.0)

    def test_off_axis_point(self):
        c3d = Corner3DSet(np.tile([1.0, 0.0, 2.0], (8, 1)))
        cs = project_corners(c3d, K)
        assert np.allclose(cs.uv[0], [506, 256])

    def test_behind_camera_raises(self):
        xyz = np.tile([0.0, 0.0, 1.0], (8, 1))
        xyz[3, 2] = -0.1
        with pytest.raises(NonPositiveDepth):
            project_corners(Corner3DSet(xyz), K)

    def test_unproject_principal_point(self):
        cs = CornerSet(np.tile([256.0, 256.0], (8, 1)), np.full(8, 2.0))
        assert np.allclose(unproject_corners(cs, K).xyz, [[0, 0, 2]] * 8)

    def test_unproject_inverse_of_projection_example(self):
        cs = CornerSet(np.tile([506.0, 256.0], (8, 1)), np.full(8, 2.0))
        assert np.allclose(unproject_corners(cs, K).xyz[0], [1, 0, 2])

    def test_unproject_rejects_virtual_depths(self):
        cs = CornerSet(np.tile([256.0, 256.0], (8, 1)), np.full(8, 2.0), "virtual")
        with pytest.raises(VirtualDepthNotConverted):
            unproject_corners(cs, K)

    def test_round_trip_1000_seeded(self):
        rng = np.random.default_rng(101)
        for _ in range(1000):
            k = Intrinsics(
                fx=rng.uniform(200, 2000),
                fy=rng.uniform(200, 2000),
                cx=rng.uniform(100, 900),
                cy=rng.uniform(100, 900),
            )
            xyz = np.stack(
                [rng.uniform(-5, 5, 8), rng.uniform(-5, 5, 8), rng.uniform(0.1, 50, 8)],
                axis=1,
            )
            back = unproject_corners(project_corners(Corner3DSet(xyz), k), k)
            assert np.allclose(back.xyz, xyz, atol=1e-9)
            cs = CornerSet(rng.uniform(0, 1000, (8, 2)), rng.uniform(0.1, 40, 8))
            again = project_corners(unproject_corners(cs, k), k)
            assert np.allclose(again.uv, cs.uv, atol=1e-9)
            assert np.allclose(again.depths, cs.depths, atol=1e-12)


class TestCanonicalize:
    def test_axis_aligned_cube_bottom_left_first(self):
        cuboid = Cuboid(np.array([0.0, 0.0, 5.0]), np.ones(3), np.eye(3))
        cs = project_corners(cuboid_to_corners(cuboid), K)
        out = canonicalize_image_order(cs)
        lower_v = out.uv[:4, 1]
        assert np.all(lower_v > out.uv[4:, 1].max() - 1e-9)
        assert out.uv[0, 0] == pytest.approx(out.uv[:4, 0].min())

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            cs = CornerSet(rng.uniform(0, 512, (8, 2)), rng.uniform(0.5, 10, 8))
            once = canonicalize_image_order(cs)
            twice = canonicalize_image_order(once)
            assert np.array_equal(once.uv, twice.uv)
            assert np.array_equal(once.depths, twice.depths)

    def test_depth_permutation_matches_uv_permutation(self):
        rng = np.random.default_rng(6)
        uv = rng.uniform(0, 512, (8, 2))
        depths = np.arange(1.0, 9.0)
        out = canonicalize_image_order(CornerSet(uv, depths))
        perm = canonical_permutation(uv)
        assert np.array_equal(out.depths, depths[perm])
        assert np.array_equal(out.uv, uv[perm])

    def test_equal_v_degenerate_uses_documented_tie_break(self):
        # All corners share one v: indices 0-3 of the stable v-sort form the
        # "lower" group, then each group sorts by u with original-index ties.
        u = np.array([3.0, 1.0, 1.0, 5.0, 9.0, 7.0, 8.0, 6.0])
        uv = np.stack([u, np.full(8, 5.0)], axis=1)
        perm = canonical_permutation(uv)
        assert perm.tolist() == [1, 2, 0, 3, 7, 5, 6, 4]
        # here the groups happen to tile the u axis, so the result reads
        # left-to-right overall
        out = uv[perm]
        assert np.all(np.diff(out[:4, 0]) >= 0) and np.all(np.diff(out[4:, 0]) >= 0)


class TestLetterbox:
    def test_wide_image_example(self):
        t = LetterboxTransform.fit(1024, 512, 512)
        assert t.scale == 0.5 and t.pad_x == 0.0 and t.pad_y == 128.0
        assert np.allclose(t.forward(np.array([[512.0, 256.0]])), [[256, 256]])

    def test_square_source_is_pure_scaling(self):
        t = LetterboxTransform.fit(640, 640, 512)
        assert t.pad_x == 0.0 and t.pad_y == 0.0
        assert t.scale == 512 / 640

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            w, h = rng.integers(100, 2000, 2)
            t = LetterboxTransform.fit(int(w), int(h), 512)
            pts = rng.uniform(-50, 2050, (8, 2))
            back = letterbox_points(letterbox_points(pts, t, "forward"), t, "inverse")
            assert np.allclose(back, pts, atol=1e-12 * np.abs(pts).max())

    def test_bad_direction(self):
        t = LetterboxTransform.fit(100, 100, 512)
        with pytest.raises(ValueError):
            letterbox_points(np.zeros((1, 2)), t, "sideways")


class TestVirtualDepth:
    def test_direct_substitution(self):
        assert virtual_depth_convert(10.0, 1024.0, 512.0, "to_virtual") == pytest.approx(5.0)

    def test_identity_when_canonical(self):
        assert virtual_depth_convert(7.3, 512.0, 512.0, "to_virtual") == pytest.approx(7.3)

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            d = rng.uniform(0.01, 100)
            f = rng.uniform(200, 2000)
            h = rng.uniform(100, 2000)
            dv = virtual_depth_convert(d, f, h, "to_virtual")
            back = virtual_depth_convert(dv, f, h, "to_metric")
            assert abs(back - d) <= 1e-12 * d

    def test_rejects_non_positive(self):
        with pytest.raises(NonPositiveInput):
            virtual_depth_convert(-1.0, 500.0, 512.0, "to_virtual")
        with pytest.raises(NonPositiveInput):
            virtual_depth_convert(1.0, 0.0, 512.0, "to_virtual")


class TestCubePrior:
    def test_unit_cube(self):
        center, s0 = cube_prior(Corner3DSet(CUBE_TEMPLATE + [1.0, 2.0, 3.0]))
        assert np.allclose(center, [1, 2, 3])
        assert np.allclose(s0, [1, 1, 1])

    def test_coincident_corners(self):
        _, s0 = cube_prior(Corner3DSet(np.tile([2.0, 0.0, 1.0], (8, 1))))
        assert np.allclose(s0, 0.0)

    def test_scales_linearly(self):
        rng = np.random.default_rng(4)
        xyz = rng.uniform(-2, 2, (8, 3))
        _, s0 = cube_prior(Corner3DSet(xyz))
        _, s3 = cube_prior(Corner3DSet(3.0 * xyz))
        assert np.allclose(s3, 3.0 * s0)


class TestValidation:
    def test_cuboid_rejects_improper_rotation(self):
        reflection = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Cuboid(np.zeros(3), np.ones(3), reflection)

    def test_cuboid_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Cuboid(np.zeros(3), np.ones(3), np.eye(3) + 1e-6)

    def test_cuboid_rejects_non_positive_size(self):
        with pytest.raises(ValueError):
            Cuboid(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.eye(3))

    def test_intrinsics_reject_bad_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)

    def test_corner_set_needs_positive_depths(self):
        with pytest.raises(NonPositiveDepth):
            CornerSet(np.zeros((8, 2)), np.zeros(8))
