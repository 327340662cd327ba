"""Triplane sampling, point decoding and emission-absorption ray rendering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from .geometry import Camera, pixel_centers, pixel_ray
from .tensor import (Tensor, as_tensor, custom_op, gelu, matmul, reshape,
                     sigmoid, softplus, sparse_matmul)

BOX_MIN, BOX_MAX = -1.0, 1.0


@dataclass
class RaySampling:
    samples: int = 64
    stratified: bool = False
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples per ray must be >= 1")


@dataclass
class TriplaneField:
    """Feature planes ``[3, M, M, d_T]`` in (xy, yz, zx) order plus the point decoder.

    ``decoder`` holds ``w1 [d_T, H]``, ``b1 [H]``, ``w2 [H, 4]``, ``b2 [4]``;
    output columns are RGB pre-activations followed by density.
    """

    grids: Tensor
    decoder: dict[str, Tensor]

    @property
    def resolution(self) -> int:
        return self.grids.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.grids.shape[3]


def init_decoder(feature_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    return {
        "w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (feature_dim, hidden)), True, dtype),
        "b1": Tensor(np.zeros(hidden), True, dtype),
        "w2": Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, 4)), True, dtype),
        "b2": Tensor(np.zeros(4), True, dtype),
    }


# ------------------------------------------------------------------ sampling


def _axis_weights(coord: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower node index, upper node index and upper weight along one axis.

    Node i sits at ``-1 + 2 (i + 0.5) / m``; coordinates beyond the outer
    node centres clamp to the edge.
    """
    x = np.clip((coord + 1.0) * (m / 2.0) - 0.5, 0.0, m - 1.0)
    lo = np.minimum(np.floor(x), max(m - 2, 0)).astype(np.int64)
    frac = x - lo
    return lo, np.minimum(lo + 1, m - 1), frac


def bilinear_weights(a: np.ndarray, b: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices ``[P, 4]`` and weights ``[P, 4]`` into an ``m x m`` grid."""
    i0, i1, fa = _axis_weights(np.asarray(a, dtype=np.float64), m)
    j0, j1, fb = _axis_weights(np.asarray(b, dtype=np.float64), m)
    idx = np.stack([i0 * m + j0, i0 * m + j1, i1 * m + j0, i1 * m + j1], axis=-1)
    w = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=-1)
    return idx, w


def sampling_matrix(points: np.ndarray, m: int, dtype=np.float64) -> sparse.csr_matrix:
    """Sparse ``[P, 3 m^2]`` operator summing bilinear samples of the three planes.

    Multiplying it with the stacked planes ``[3 m^2, d_T]`` gives
    ``f_xy + f_yz + f_zx`` per point.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    parts_idx, parts_w = [], []
    for plane, (a, b) in enumerate(((x, y), (y, z), (z, x))):
        idx, w = bilinear_weights(a, b, m)
        parts_idx.append(idx + plane * m * m)
        parts_w.append(w)
    idx = np.concatenate(parts_idx, axis=1)
    w = np.concatenate(parts_w, axis=1).astype(dtype)
    n = p.shape[0]
    return sparse.csr_matrix((w.reshape(-1), idx.reshape(-1), np.arange(0, 12 * n + 1, 12)),
                             shape=(n, 3 * m * m))


def sample_plane(grid: Tensor, a, b) -> Tensor:
    """Bilinear sample of one ``[M, M, d_T]`` plane at in-plane coordinates (a, b)."""
    grid = as_tensor(grid)
    m = grid.shape[0]
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    idx, w = bilinear_weights(a, b, m)
    n = a.shape[0]
    mat = sparse.csr_matrix((w.reshape(-1).astype(grid.dtype), idx.reshape(-1), np.arange(0, 4 * n + 1, 4)),
                            shape=(n, m * m))
    return sparse_matmul(mat, reshape(grid, (m * m, grid.shape[2])))


def point_features(points: np.ndarray, field: TriplaneField) -> Tensor:
    """Summed plane features ``[P, d_T]`` at world points inside the box."""
    m, dt = field.resolution, field.feature_dim
    mat = sampling_matrix(points, m, field.grids.dtype)
    return sparse_matmul(mat, reshape(field.grids, (3 * m * m, dt)))


def decode_point(features: Tensor, decoder: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Point decoder MLP: RGB in [0, 1] via sigmoid, density >= 0 via softplus."""
    h = gelu(matmul(features, decoder["w1"]) + decoder["b1"])
    out = matmul(h, decoder["w2"]) + decoder["b2"]
    return sigmoid(out[:, :3]), softplus(out[:, 3])


# ------------------------------------------------------------------ rays


def clip_rays(origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection of rays with the box; returns (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (BOX_MIN - origins) * inv
        t2 = (BOX_MAX - origins) * inv
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # parallel to a slab: nan when exactly on the face, treat as inside
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    near = np.maximum(lo.max(axis=-1), 0.0)
    far = hi.min(axis=-1)
    return near, far, far > near


def ray_box_clip(origin, direction) -> Optional[tuple[float, float]]:
    near, far, hit = clip_rays(np.asarray(origin, dtype=np.float64)[None],
                               np.asarray(direction, dtype=np.float64)[None])
    return (float(near[0]), float(far[0])) if hit[0] else None


def composite(colors: Tensor, sigmas: Tensor, deltas: np.ndarray, background) -> tuple[Tensor, np.ndarray]:
    """Alpha-composite ``r`` samples per ray front to back.

    ``colors`` is ``[R, r, 3]``, ``sigmas`` and ``deltas`` are ``[R, r]``.
    Returns the pixel colours ``[R, 3]`` (differentiable) and the
    accumulated opacity ``[R]``.
    """
    colors, sigmas = as_tensor(colors), as_tensor(sigmas)
    c = colors.data
    deltas = np.asarray(deltas, dtype=sigmas.dtype)
    bg = np.asarray(background, dtype=c.dtype)
    tau = sigmas.data * deltas
    cum = np.cumsum(tau, axis=-1)
    trans = np.exp(-(cum - tau))          # T_i, light reaching sample i
    trans_next = np.exp(-cum)             # T_{i+1}
    alpha = -np.expm1(-tau)
    w = trans * alpha
    t_final = trans_next[..., -1]
    rgb = np.einsum("...s,...sc->...c", w, c) + t_final[..., None] * bg
    opacity = w.sum(axis=-1)

    def vjp(g):
        gc = w[..., None] * g[..., None, :] if colors.requires_grad else None
        gs = None
        if sigmas.requires_grad:
            wc = w[..., None] * c
            # colour arriving from behind sample j: sum_{i>j} w_i c_i + T_final bg
            behind = np.cumsum(wc[..., ::-1, :], axis=-2)[..., ::-1, :] - wc
            behind = behind + t_final[..., None, None] * bg
            dtau = np.einsum("...c,...sc->...s", g, trans_next[..., None] * c - behind)
            gs = dtau * deltas
        return gc, gs

    return custom_op(rgb, (colors, sigmas), vjp), opacity


def sample_depths(near: np.ndarray, far: np.ndarray, samples: int,
                  rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stratified depths ``[R, r]`` in [near, far] and segment lengths.

    Without ``rng`` each stratum is sampled at its midpoint.  The last
    segment runs to ``far``.
    """
    span = (far - near)[:, None]
    jitter = 0.5 if rng is None else rng.random((near.shape[0], samples))
    t = near[:, None] + span * (np.arange(samples) + jitter) / samples
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = far - t[:, -1]
    return t, deltas


def _scatter_rows(values: Tensor, rows: np.ndarray, total: int, fill: np.ndarray) -> Tensor:
    out = np.broadcast_to(fill, (total,) + values.shape[1:]).copy()
    out[rows] = values.data
    return custom_op(out, (values,), lambda g: (g[rows],))


def render_rays(field: TriplaneField, origins: np.ndarray, dirs: np.ndarray, sampling: RaySampling,
                rng: Optional[np.random.Generator] = None) -> tuple[Tensor, np.ndarray]:
    """Render rays against the field; rays missing the box get the background.

    ``rng`` enables per-ray stratified jitter (training); otherwise midpoints.
    """
    dtype = field.grids.dtype
    bg = np.asarray(sampling.background, dtype=dtype)
    near, far, hit = clip_rays(origins, dirs)
    rows = np.flatnonzero(hit)
    total = origins.shape[0]
    opacity = np.zeros(total)
    if rows.size == 0:
        return Tensor._wrap(np.broadcast_to(bg, (total, 3)).astype(dtype)), opacity
    r = sampling.samples
    t, deltas = sample_depths(near[rows], far[rows], r, rng if sampling.stratified else None)
    pts = origins[rows, None, :] + t[..., None] * dirs[rows, None, :]
    np.clip(pts, BOX_MIN, BOX_MAX, out=pts)
    rgb, sigma = decode_point(point_features(pts.reshape(-1, 3), field), field.decoder)
    colors = reshape(rgb, (rows.size, r, 3))
    sigmas = reshape(sigma, (rows.size, r))
    out, acc = composite(colors, sigmas, deltas, bg)
    opacity[rows] = acc
    if rows.size == total:
        return out, opacity
    return _scatter_rows(out, rows, total, bg), opacity


def render_image(camera: Camera, field: TriplaneField, width: int | None = None, height: int | None = None,
                 sampling: RaySampling | None = None, chunk: int = 2048) -> np.ndarray:
    """Render a full ``H x W x 3`` image (no gradient tracking)."""
    sampling = sampling or RaySampling()
    if width is not None and width != camera.width:
        camera = camera.scaled(width / camera.width)
    width, height = camera.width, camera.height
    u, v = pixel_centers(width, height)
    origins, dirs = pixel_ray(camera, u, v)
    out = np.empty((u.size, 3))
    eval_sampling = RaySampling(sampling.samples, False, sampling.background)
    for s in range(0, u.size, chunk):
        rgb, _ = render_rays(field, origins[s:s + chunk], dirs[s:s + chunk], eval_sampling)
        out[s:s + chunk] = rgb.data
    return out.reshape(height, width, 3)
