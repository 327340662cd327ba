import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator

from oracles import transmittance_closed_form
from plkrf import renderer as rd
from plkrf.data import Primitive, raycast
from plkrf.geometry import Camera, look_at
from plkrf.tensor import Tape, Tensor, backward, grad_check, tsum


def node_coords(m):
    return -1 + 2 * (np.arange(m) + 0.5) / m


def interp_oracle(grid, a, b):
    """scipy linear interpolation on node centres, clamped to the outer nodes."""
    m = grid.shape[0]
    c = node_coords(m)
    f = RegularGridInterpolator((c, c), grid, method="linear")
    pts = np.stack([np.clip(a, c[0], c[-1]), np.clip(b, c[0], c[-1])], axis=-1)
    return f(pts)


class TestSamplePlane:
    def test_node_centre_returns_node(self):
        rng = np.random.default_rng(0)
        grid = rng.normal(size=(4, 4, 3))
        c = node_coords(4)
        out = rd.sample_plane(Tensor(grid), c[1], c[2]).data
        np.testing.assert_allclose(out[0], grid[1, 2], atol=1e-15)

    def test_midpoint_of_four_nodes(self):
        rng = np.random.default_rng(1)
        grid = rng.normal(size=(4, 4, 2))
        c = node_coords(4)
        out = rd.sample_plane(Tensor(grid), (c[1] + c[2]) / 2, (c[0] + c[1]) / 2).data
        np.testing.assert_allclose(out[0], grid[1:3, 0:2].mean(axis=(0, 1)), atol=1e-15)

    def test_matches_scipy_with_clamping(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(6, 6, 3))
        a, b = rng.uniform(-1, 1, (2, 500))
        out = rd.sample_plane(Tensor(grid), a, b).data
        np.testing.assert_allclose(out, interp_oracle(grid, a, b), atol=1e-12)

    def test_reproduces_linear_fields(self):
        c = node_coords(5)
        grid = (2 * c[:, None] - 3 * c[None, :] + 0.5)[..., None]
        a, b = np.random.default_rng(3).uniform(c[0], c[-1], (2, 100))
        out = rd.sample_plane(Tensor(grid), a, b).data[:, 0]
        np.testing.assert_allclose(out, 2 * a - 3 * b + 0.5, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        grid = Tensor(rng.normal(size=(3, 3, 2)))
        a, b = rng.uniform(-1, 1, (2, 7))
        w = rng.normal(size=(7, 2))
        assert grad_check(lambda g: tsum(rd.sample_plane(g, a, b) * w), grid) <= 1e-6


class TestPointFeatures:
    def test_sampling_matrix_structure(self):
        pts = np.random.default_rng(5).uniform(-1.2, 1.2, (40, 3))
        mat = rd.sampling_matrix(pts, 4)
        assert mat.shape == (40, 48)
        assert np.all(np.diff(mat.indptr) == 12)
        np.testing.assert_allclose(np.asarray(mat.sum(axis=1)).ravel(), 3.0, atol=1e-14)

    def test_sum_of_three_planes(self):
        rng = np.random.default_rng(6)
        grids = rng.normal(size=(3, 5, 5, 2))
        pts = rng.uniform(-1, 1, (50, 3))
        x, y, z = pts.T
        field = rd.TriplaneField(Tensor(grids), rd.init_decoder(2, 4, rng))
        want = interp_oracle(grids[0], x, y) + interp_oracle(grids[1], y, z) + interp_oracle(grids[2], z, x)
        np.testing.assert_allclose(rd.point_features(pts, field).data, want, atol=1e-12)

    def test_decoder_ranges(self):
        rng = np.random.default_rng(7)
        dec = rd.init_decoder(3, 8, rng)
        rgb, sigma = rd.decode_point(Tensor(rng.normal(size=(100, 3)) * 20), dec)
        assert rgb.data.min() >= 0 and rgb.data.max() <= 1
        assert sigma.data.min() >= 0


class TestClip:
    def test_through_centre(self):
        assert rd.ray_box_clip([0, 0, -3], [0, 0, 1]) == pytest.approx((2.0, 4.0))

    def test_miss(self):
        assert rd.ray_box_clip([0, 2, -3], [0, 0, 1]) is None

    def test_origin_inside(self):
        near, far = rd.ray_box_clip([0.2, 0.1, 0.0], [1, 0, 0])
        assert near == 0.0 and far == pytest.approx(0.8)

    def test_diagonal(self):
        d = np.ones(3) / np.sqrt(3)
        near, far = rd.ray_box_clip(-3 * d, d)
        assert near == pytest.approx(3 - np.sqrt(3)) and far == pytest.approx(3 + np.sqrt(3))


class TestComposite:
    def test_zero_density_gives_background(self):
        bg = np.array([0.2, 0.4, 0.6])
        rgb, acc = rd.composite(Tensor(np.zeros((3, 8, 3))), Tensor(np.zeros((3, 8))), np.full((3, 8), 0.1), bg)
        np.testing.assert_array_equal(rgb.data, np.tile(bg, (3, 1)))
        np.testing.assert_array_equal(acc, 0.0)

    def test_opaque_first_sample(self):
        c = np.random.default_rng(8).random((1, 4, 3))
        sig = np.array([[1e4, 1.0, 1.0, 1.0]])
        rgb, acc = rd.composite(Tensor(c), Tensor(sig), np.full((1, 4), 0.5), np.ones(3))
        np.testing.assert_allclose(rgb.data[0], c[0, 0], atol=1e-12)
        assert acc[0] == pytest.approx(1.0, abs=1e-12)

    def test_constant_density_uniform_samples(self):
        r = 64
        rgb, acc = rd.composite(Tensor(np.ones((1, r, 3))), Tensor(np.ones((1, r))), np.full((1, r), 1.0 / r),
                                np.zeros(3))
        assert abs(rgb.data[0, 0] - transmittance_closed_form(1.0, 1.0)) <= 2e-3

    def test_conservation(self):
        rng = np.random.default_rng(9)
        sig = rng.exponential(3.0, (1000, 32))
        deltas = rng.uniform(0.001, 0.2, (1000, 32))
        # white colours and black background isolate sum_i T_i a_i; the rest is T_final
        rgb, acc = rd.composite(Tensor(np.ones((1000, 32, 3))), Tensor(sig), deltas, np.zeros(3))
        t_final = np.exp(-(sig * deltas).sum(axis=1))
        np.testing.assert_allclose(acc + t_final, 1.0, atol=1e-12)
        np.testing.assert_allclose(rgb.data[:, 0], acc, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(10)
        c = Tensor(rng.random((3, 6, 3)))
        s = Tensor(rng.exponential(2.0, (3, 6)))
        deltas = rng.uniform(0.05, 0.3, (3, 6))
        w = rng.normal(size=(3, 3))
        bg = np.array([1.0, 0.5, 0.0])
        assert grad_check(lambda t: tsum(rd.composite(t, s, deltas, bg)[0] * w), c) <= 1e-6
        assert grad_check(lambda t: tsum(rd.composite(c, t, deltas, bg)[0] * w), s) <= 1e-6

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.floats(0.0, 50.0), st.integers(0, 2**31))
    def test_weights_are_a_distribution(self, r, scale, seed):
        rng = np.random.default_rng(seed)
        sig = rng.random((2, r)) * scale
        _, acc = rd.composite(Tensor(rng.random((2, r, 3))), Tensor(sig), rng.uniform(0.01, 0.1, (2, r)), np.ones(3))
        assert np.all(acc >= 0) and np.all(acc <= 1 + 1e-12)


class TestDepths:
    def test_midpoints(self):
        t, d = rd.sample_depths(np.array([2.0]), np.array([4.0]), 4)
        np.testing.assert_allclose(t[0], [2.25, 2.75, 3.25, 3.75])
        np.testing.assert_allclose(d[0], [0.5, 0.5, 0.5, 0.25])

    def test_stratified_stays_in_strata(self):
        rng = np.random.default_rng(11)
        near, far = np.zeros(50), np.full(50, 2.0)
        t, d = rd.sample_depths(near, far, 16, rng)
        k = np.floor(t / (2.0 / 16))
        np.testing.assert_array_equal(k, np.tile(np.arange(16), (50, 1)))
        assert np.all(d > 0)
        np.testing.assert_allclose(d[:, -1], far - t[:, -1])


def constant_field(sigma, color, m=2, hidden=4):
    """Field with the same colour and density everywhere (decoder biases only)."""
    dec = {
        "w1": Tensor(np.zeros((1, hidden))), "b1": Tensor(np.zeros(hidden)),
        "w2": Tensor(np.zeros((hidden, 4))),
        "b2": Tensor(np.r_[np.log(np.asarray(color) / (1 - np.asarray(color))), np.log(np.expm1(sigma))]),
    }
    return rd.TriplaneField(Tensor(np.zeros((3, m, m, 1))), dec)


class TestRenderRays:
    def test_constant_field_matches_quadrature(self):
        field = constant_field(1.5, [0.3, 0.5, 0.7])
        o = np.array([[0.0, 0.0, -3.0]])
        d = np.array([[0.0, 0.0, 1.0]])
        rgb, acc = rd.render_rays(field, o, d, rd.RaySampling(64, background=(0, 0, 0)))
        covered = 2.0 - 2.0 / 128            # first half-stratum lies before the first sample
        assert acc[0] == pytest.approx(transmittance_closed_form(1.5, covered), abs=1e-12)
        np.testing.assert_allclose(rgb.data[0], acc[0] * np.array([0.3, 0.5, 0.7]), atol=1e-12)

    def test_missed_rays_get_background(self):
        field = constant_field(5.0, [0.5, 0.5, 0.5])
        o = np.array([[0.0, 0.0, -3.0], [0.0, 3.0, -3.0]])
        d = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        bg = (0.1, 0.2, 0.3)
        rgb, acc = rd.render_rays(field, o, d, rd.RaySampling(16, background=bg))
        np.testing.assert_array_equal(rgb.data[1], bg)
        assert acc[1] == 0.0 and acc[0] > 0.99

    def test_gradient_through_missed_rows(self):
        rng = np.random.default_rng(12)
        grids = Tensor(rng.normal(size=(3, 2, 2, 3)) * 0.3)
        dec = rd.init_decoder(3, 4, rng)
        o = np.array([[0.0, 0.0, -3.0], [0.0, 3.0, -3.0], [0.3, -0.2, -3.0]])
        d = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.1, 0.99]])
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        sampling = rd.RaySampling(8)
        f = lambda g: tsum(rd.render_rays(rd.TriplaneField(g, dec), o, d, sampling)[0])
        assert grad_check(f, grids) <= 1e-6

    def test_stratified_needs_rng_only_in_training(self):
        field = constant_field(1.0, [0.5, 0.5, 0.5])
        o, d = np.array([[0.0, 0.0, -3.0]]), np.array([[0.0, 0.0, 1.0]])
        s = rd.RaySampling(8, stratified=True)
        a = rd.render_rays(field, o, d, s, np.random.default_rng(0))[0].data
        b = rd.render_rays(field, o, d, s, np.random.default_rng(0))[0].data
        np.testing.assert_array_equal(a, b)


def box_field(m=64, half=0.5):
    """Opaque box of half-extent ``half`` encoded as plane indicators summed to 3 inside."""
    c = node_coords(m)
    ind = (np.abs(c) < half).astype(float)
    plane = (ind[:, None] * ind[None, :])[..., None]
    grids = np.stack([plane] * 3)
    dec = {
        "w1": Tensor(np.array([[20.0]])), "b1": Tensor(np.array([-50.0])),
        "w2": Tensor(np.array([[0.0, 0.0, 0.0, 10.0]])), "b2": Tensor(np.array([5.0, -5.0, -5.0, -10.0])),
    }
    return rd.TriplaneField(Tensor(grids), dec)


def test_box_silhouette_matches_analytic_projection():
    eye = np.array([2.2, -1.6, 1.4])
    K = np.array([[70.0, 0, 32], [0, 70.0, 32], [0, 0, 1]])
    cam = Camera(K, look_at(eye), eye, 64, 64)
    img = rd.render_image(cam, box_field(), sampling=rd.RaySampling(128, background=(1, 1, 1)))
    neural = img[..., 1] < 0.5
    box = Primitive("box", np.zeros(3), np.full(3, 0.5), np.zeros(3))
    analytic = raycast([box], cam)[..., 1] < 0.5
    assert analytic.sum() > 200
    boundary = ndimage.binary_dilation(analytic) & ~ndimage.binary_erosion(analytic)
    assert not np.any((neural != analytic) & ~boundary)
