import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (closest_distance_exact, closest_points_lstsq, random_rotation,
                     random_unit, rotate, twisted_near_parallel)
from plkrf import geometry as geo
from plkrf.errors import DegenerateRayError, GeometryError, IntrinsicsError
from plkrf.geometry import Camera, PluckerLine


def line(o, d):
    return geo.ray_to_plucker(np.asarray(o, float), np.asarray(d, float))


def centered_camera(eye, size=64, focal=70.0):
    K = np.array([[focal, 0, size / 2], [0, focal, size / 2], [0, 0, 1.0]])
    eye = np.asarray(eye, float)
    return Camera(K, geo.look_at(eye), eye, size, size)


class TestRayToPlucker:
    def test_line_through_origin(self):
        l = line([0, 0, 0], [0, 0, 5])
        np.testing.assert_array_equal(l.d, [0, 0, 1])
        np.testing.assert_array_equal(l.m, [0, 0, 0])

    def test_hand_cross_product(self):
        l = line([1, 0, 0], [0, 0, 1])
        np.testing.assert_array_equal(l.d, [0, 0, 1])
        np.testing.assert_array_equal(l.m, [0, -1, 0])

    def test_origin_shift(self):
        a = line([0.3, -1.2, 2.0], [1, 2, 3])
        b = line(np.array([0.3, -1.2, 2.0]) + 3 * a.d, [1, 2, 3])
        np.testing.assert_allclose(a.m, b.m, atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateRayError):
            line([0, 0, 0], [0, 0, 1e-13])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
           st.floats(-10, 10))
    def test_invariants(self, o, d, s):
        a = line(o, d)
        b = line(np.asarray(o) + s * a.d, d)
        assert abs(np.linalg.norm(a.d) - 1) <= 1e-12
        assert abs(a.d @ a.m) <= 1e-12
        np.testing.assert_allclose(a.m, b.m, atol=1e-12)


class TestLineDistance:
    def test_identical(self):
        l = line([0.2, 0.4, -1], [1, 1, 0])
        assert geo.line_distance(l, l) == 0.0

    def test_unit_skew_pair(self):
        assert geo.line_distance(line([0, 0, 0], [1, 0, 0]), line([0, 0, 1], [0, 1, 0])) == pytest.approx(1.0, abs=1e-15)

    def test_parallel_branch(self):
        assert geo.line_distance(line([0, 0, 0], [0, 0, 1]), line([1, 0, 0], [0, 0, 1])) == pytest.approx(1.0, abs=1e-15)

    def test_antiparallel(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            d = random_unit(rng)
            o1, o2 = rng.uniform(-2, 2, (2, 3))
            got = geo.line_distance(line(o1, d), line(o2, -d))
            assert abs(got - closest_distance_exact(o1, d, o2, -d)) <= 1e-12

    def test_random_pairs_vs_least_squares(self):
        rng = np.random.default_rng(0)
        o1, o2 = rng.uniform(-3, 3, (2, 1000, 3))
        d1, d2 = random_unit(rng, 1000), random_unit(rng, 1000)
        l1, l2 = geo.ray_to_plucker(o1, d1), geo.ray_to_plucker(o2, d2)
        got = geo.line_distance(l1, l2)
        for i in range(1000):
            p, q = closest_points_lstsq(o1[i], l1.d[i], o2[i], l2.d[i])
            assert abs(got[i] - np.linalg.norm(p - q)) <= 1e-9

    @pytest.mark.parametrize("theta", [1e-11, 3e-10, 9e-10, 1.1e-9, 3e-9, 1e-8, 1e-7])
    def test_near_parallel_twisted_pairs_both_branches(self, theta):
        rng = np.random.default_rng(int(theta * 1e12) % 2**32)
        for _ in range(20):
            o1, d1, o2, d2, true = twisted_near_parallel(rng, theta)
            l1, l2 = line(o1, d1), line(o2, d2)
            exact = closest_distance_exact(o1, l1.d, o2, l2.d)
            assert abs(exact - true) <= 1e-9
            assert abs(geo.line_distance(l1, l2) - exact) <= 1e-7

    def test_generic_near_parallel_above_threshold(self):
        rng = np.random.default_rng(7)
        for theta in np.geomspace(2e-9, 1e-6, 40):
            d1 = random_unit(rng)
            d2 = rotate(random_unit(rng), theta, d1)
            o1, o2 = rng.uniform(-1, 1, (2, 3))
            l1, l2 = line(o1, d1), line(o2, d2)
            assert np.linalg.norm(np.cross(l1.d, l2.d)) > geo.PARALLEL_EPS
            assert abs(geo.line_distance(l1, l2) - closest_distance_exact(o1, l1.d, o2, l2.d)) <= 1e-7

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        l1 = geo.ray_to_plucker(rng.uniform(-2, 2, (500, 3)), random_unit(rng, 500))
        l2 = geo.ray_to_plucker(rng.uniform(-2, 2, (500, 3)), random_unit(rng, 500))
        np.testing.assert_allclose(geo.line_distance(l1, l2), geo.line_distance(l2, l1), atol=1e-12, rtol=0)

    def test_zero_iff_intersecting(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            x = rng.uniform(-1, 1, 3)
            d1, d2 = random_unit(rng), random_unit(rng)
            o1, o2 = x - rng.uniform(0, 3) * d1, x + rng.uniform(0, 3) * d2
            assert geo.line_distance(line(o1, d1), line(o2, d2)) <= 1e-12
            p, q = closest_points_lstsq(o1, d1, o2, d2)
            assert np.linalg.norm(p - q) <= 1e-7
        for _ in range(200):
            o1, o2 = rng.uniform(-1, 1, (2, 3))
            d1, d2 = random_unit(rng), random_unit(rng)
            dist = geo.line_distance(line(o1, d1), line(o2, d2))
            p, q = closest_points_lstsq(o1, d1, o2, d2)
            assert (dist <= 1e-12) == (np.linalg.norm(p - q) <= 1e-7)


class TestCameraRays:
    def test_optical_axis(self):
        cam = Camera(np.diag([50.0, 50.0, 1.0]), np.eye(3), np.zeros(3), 64, 64)
        o, d = geo.pixel_ray(cam, 0.0, 0.0)
        np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)
        np.testing.assert_array_equal(o, [0, 0, 0])

    def test_principal_point(self):
        rng = np.random.default_rng(8)
        R = random_rotation(rng)
        K = np.array([[80.0, 0, 30.5], [0, 75.0, 20.25], [0, 0, 1]])
        cam = Camera(K, R, rng.normal(size=3), 64, 48)
        _, d = geo.pixel_ray(cam, 30.5, 20.25)
        np.testing.assert_allclose(d, R[:, 2], atol=1e-14)

    def test_triangulation(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            X = rng.uniform(-0.5, 0.5, 3)
            cams = [centered_camera(3 * random_unit(rng)) for _ in range(2)]
            rays = [geo.pixel_ray(c, *c.project(X)) for c in cams]
            p, q = closest_points_lstsq(rays[0][0], rays[0][1], rays[1][0], rays[1][1])
            np.testing.assert_allclose((p + q) / 2, X, atol=1e-8)

    def test_singular_intrinsics(self):
        cam = Camera(np.zeros((3, 3)), np.eye(3), np.zeros(3), 8, 8)
        with pytest.raises(IntrinsicsError):
            geo.pixel_ray(cam, 1.0, 1.0)


class TestPatchRays:
    def test_single_patch_through_center(self):
        cam = centered_camera([0, 0, -3], size=14)
        l = geo.patch_rays(cam, 14)
        assert len(l) == 1
        np.testing.assert_allclose(l.d[0], [0, 0, 1], atol=1e-15)

    def test_mirror_symmetry(self):
        cam = Camera(np.array([[50.0, 0, 8], [0, 50.0, 8], [0, 0, 1]]), np.eye(3), [0, 0, -3], 16, 16)
        l = geo.patch_rays(cam, 8)
        assert len(l) == 4
        # columns mirror in x, rows mirror in y
        np.testing.assert_allclose(l.d[0] * [-1, 1, 1], l.d[1], atol=1e-15)
        np.testing.assert_allclose(l.d[0] * [1, -1, 1], l.d[2], atol=1e-15)
        np.testing.assert_allclose(l.d[0] * [-1, -1, 1], l.d[3], atol=1e-15)

    def test_paper_token_count(self):
        cam = centered_camera([0, 0, -3], size=448, focal=500.0)
        assert len(geo.patch_rays(cam, 14)) == 1024

    def test_divisibility(self):
        with pytest.raises(GeometryError):
            geo.patch_rays(centered_camera([0, 0, -3], size=64), 14)


class TestPluckerfLines:
    def test_single_pixel(self):
        l = geo.pluckerf_lines(1)
        np.testing.assert_array_equal(l.d, [[0, 0, 1], [1, 0, 0], [0, 1, 0]])
        np.testing.assert_array_equal(l.m, np.zeros((3, 3)))

    def test_two_cell_centers(self):
        l = geo.pluckerf_lines(2)
        assert len(l) == 12
        pts = l.closest_point_to_origin()
        for p, (ax_a, ax_b) in enumerate(((0, 1), (1, 2), (2, 0))):
            block = pts[4 * p:4 * p + 4]
            np.testing.assert_allclose(block[:, ax_a], [-0.5, -0.5, 0.5, 0.5], atol=1e-15)
            np.testing.assert_allclose(block[:, ax_b], [-0.5, 0.5, -0.5, 0.5], atol=1e-15)

    @pytest.mark.parametrize("n", [1, 3, 8])
    def test_lines_cross_cube_and_are_deterministic(self, n):
        l = geo.pluckerf_lines(n)
        assert np.all(np.abs(l.closest_point_to_origin()) < 1)
        again = geo.pluckerf_lines(n)
        assert l.d.tobytes() == again.d.tobytes() and l.m.tobytes() == again.m.tobytes()


def slab_hits(o, d):
    """Independent ray/cube test by dense sampling along the ray."""
    t = np.linspace(0, 10, 20001)
    pts = o[None] + t[:, None] * d[None]
    return np.any(np.all(np.abs(pts) <= 1, axis=1))


class TestDistanceMatrix:
    def test_self_symmetric_zero_diagonal(self):
        l = geo.pluckerf_lines(3)
        D = geo.distance_matrix(l, l).values
        np.testing.assert_allclose(D, D.T, atol=1e-12)
        np.testing.assert_array_equal(np.diag(D), 0.0)
        assert (D >= 0).all()

    def test_all_cls(self):
        l = geo.pluckerf_lines(2)
        D = geo.distance_matrix(l, l, np.ones(12, bool))
        assert not D.values.any()

    def test_column_minima_for_rays_through_cube(self):
        n = 8
        grid = geo.pluckerf_lines(n)
        cam = centered_camera([2.0, -2.2, 1.5], size=64, focal=40.0)
        rays = geo.patch_rays(cam, 8)
        D = geo.distance_matrix(grid, rays).values
        mins = D.min(axis=0)
        for k in range(len(rays)):
            o = np.asarray(cam.t)
            if slab_hits(o, rays.d[k]):
                assert mins[k] <= np.sqrt(2) / n + 1e-12
            else:
                assert mins[k] > 0


class TestPoses:
    def test_single_camera_identity(self):
        cam = centered_camera([1, 2, 3])
        (rel,) = geo.relative_poses([cam])
        np.testing.assert_array_equal(rel.R, np.eye(3))
        np.testing.assert_array_equal(rel.t, np.zeros(3))

    def test_identical_cameras(self):
        cam = centered_camera([1, 2, 3])
        for rel in geo.relative_poses([cam, cam]):
            np.testing.assert_allclose(rel.R, np.eye(3), atol=1e-15)
            np.testing.assert_allclose(rel.t, 0, atol=1e-15)

    def test_compose_inverse(self):
        rng = np.random.default_rng(11)
        cams = [Camera(np.eye(3), random_rotation(rng), rng.normal(size=3), 8, 8) for _ in range(2)]
        rel = geo.relative_poses(cams)
        R0, t0 = cams[0].R, cams[0].t
        for c, r in zip(cams, rel):
            np.testing.assert_allclose(R0 @ r.R, c.R, atol=1e-10)
            np.testing.assert_allclose(R0 @ r.t + t0, c.t, atol=1e-10)

    def test_canonical_puts_target_at_origin(self):
        cams = [centered_camera(3 * random_unit(np.random.default_rng(s))) for s in range(3)]
        can = geo.canonical_cameras(cams)
        np.testing.assert_allclose(can[0].t, [0, 0, -3], atol=1e-12)
        for c in can:
            # every camera still looks at the box centre
            np.testing.assert_allclose(c.R[:, 2], -c.t / np.linalg.norm(c.t), atol=1e-12)


class TestRotationAngle:
    def test_same(self):
        R = random_rotation(np.random.default_rng(1))
        assert geo.rotation_angle(R, R) == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [1, 2, -3]])
    def test_ninety(self, axis):
        assert geo.rotation_angle(np.eye(3), geo.rotation_about(axis, 90)) == pytest.approx(90.0, abs=1e-9)

    def test_construct_and_measure(self):
        rng = np.random.default_rng(2)
        for theta in np.linspace(1.0, 179.0, 60):
            R = random_rotation(rng)
            axis = random_unit(rng)
            Rt = np.stack([rotate(axis, np.deg2rad(theta), e) for e in np.eye(3)], axis=1)
            assert geo.rotation_angle(R, R @ Rt) == pytest.approx(theta, abs=1e-9)
