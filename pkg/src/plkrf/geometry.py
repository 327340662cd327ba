"""Plücker lines, pinhole cameras and line-to-line distance matrices.

Cameras follow the OpenCV convention (x right, y down, z forward).  ``R``
maps camera axes to world axes and ``t`` is the camera centre, so a pixel
ray is ``o = t``, ``d = R K^-1 u / |K^-1 u|``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateRayError, GeometryError, IntrinsicsError

PARALLEL_EPS = 1e-9


@dataclass(frozen=True)
class PluckerLine:
    """One line, or a batch of lines, as unit direction ``d`` and moment ``m = o x d``.

    Both arrays have shape ``(..., 3)``.
    """

    d: np.ndarray
    m: np.ndarray

    def __len__(self) -> int:
        return 1 if self.d.ndim == 1 else self.d.shape[0]

    def __getitem__(self, idx) -> "PluckerLine":
        return PluckerLine(self.d[idx], self.m[idx])

    def as_array(self) -> np.ndarray:
        """The 6-vector ``(d, m)`` per line."""
        return np.concatenate([self.d, self.m], axis=-1)

    def closest_point_to_origin(self) -> np.ndarray:
        return np.cross(self.d, self.m)

    @staticmethod
    def concat(lines: Sequence["PluckerLine"]) -> "PluckerLine":
        return PluckerLine(np.concatenate([np.atleast_2d(l.d) for l in lines]),
                           np.concatenate([np.atleast_2d(l.m) for l in lines]))


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64))
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @property
    def K_inv(self) -> np.ndarray:
        K = self.K
        if K.shape != (3, 3) or abs(np.linalg.det(K)) < 1e-12 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise IntrinsicsError(f"singular or malformed intrinsics:\n{K}")
        return np.linalg.inv(K)

    @property
    def pose(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        out = np.eye(4)
        out[:3, :3] = self.R
        out[:3, 3] = self.t
        return out

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """Rotation and translation mapping world points into camera coordinates."""
        return self.R.T, -self.R.T @ self.t

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of world points, shape ``(..., 2)``."""
        Rw, tw = self.world_to_camera()
        pc = points @ Rw.T + tw
        uvw = pc @ self.K.T
        return uvw[..., :2] / uvw[..., 2:3]

    def scaled(self, factor: float) -> "Camera":
        K = self.K.copy()
        K[:2] *= factor
        return replace(self, K=K, width=int(round(self.width * factor)), height=int(round(self.height * factor)))


@dataclass
class DistanceBias:
    """Pairwise line distances between query lines (rows) and key tokens (columns)."""

    values: np.ndarray
    cls_flags: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cls_flags is None:
            self.cls_flags = np.zeros(self.values.shape[1], dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def rotation_about(axis, degrees: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    theta = np.deg2rad(degrees)
    x = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * x + (1 - np.cos(theta)) * (x @ x)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``eye`` facing ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def ray_to_plucker(origin, direction) -> PluckerLine:
    """Line through ``origin`` along ``direction``; inputs broadcast over leading axes."""
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise DegenerateRayError("ray direction has (near-)zero length")
    d = direction / norm
    o = np.broadcast_to(origin, d.shape)
    return PluckerLine(d, np.cross(o, d))


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def line_distance(l1: PluckerLine, l2: PluckerLine, eps_par: float = PARALLEL_EPS) -> np.ndarray:
    """Closest distance between lines; broadcasts over leading axes.

    Skew or intersecting pairs use ``|d1.m2 + d2.m1| / |d1 x d2|``, evaluated
    as ``|(p1 - p2).(d1 x d2)| / |d1 x d2|`` with ``p = d x m`` and the cross
    product taken against ``d2 -+ d1`` so that near-parallel directions do
    not cancel.  Pairs with ``|d1 x d2| <= eps_par`` use
    ``|d1 x (m1 - (d1.d2) m2)|``; there ``d1.d2`` differs from its sign by
    less than 1e-18, so the sign is used and identical lines give exactly 0.
    """
    d1, m1, d2, m2 = l1.d, l1.m, l2.d, l2.m
    c = _dot(d1, d2)
    sign = np.where(c >= 0, 1.0, -1.0)[..., None]
    n = np.cross(d1, d2 - sign * d1)
    nn = np.linalg.norm(n, axis=-1)
    w = np.cross(d1, m1) - np.cross(d2, m2)
    skew = np.abs(_dot(w, n)) / np.where(nn > eps_par, nn, 1.0)
    par = np.linalg.norm(np.cross(d1, m1 - sign * m2), axis=-1)
    return np.where(nn > eps_par, skew, par)


def pixel_ray(camera: Camera, u, v) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through continuous pixel coordinates ``(u, v)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uvw = np.stack([u, v, np.ones_like(u)], axis=-1)
    cam = uvw @ camera.K_inv.T
    d = (cam @ camera.R.T) / np.linalg.norm(cam, axis=-1, keepdims=True)
    return np.broadcast_to(camera.t, d.shape).copy(), d


def pixel_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major pixel-centre coordinates ``(u, v)`` with the +0.5 convention."""
    v, u = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    return u.reshape(-1), v.reshape(-1)


def patch_rays(camera: Camera, patch_size: int) -> PluckerLine:
    """One line per image patch through its centre, in row-major token order."""
    if camera.width % patch_size or camera.height % patch_size:
        raise GeometryError(f"image {camera.width}x{camera.height} not divisible by patch size {patch_size}")
    rows, cols = camera.height // patch_size, camera.width // patch_size
    r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    o, d = pixel_ray(camera, ((c + 0.5) * patch_size).reshape(-1), ((r + 0.5) * patch_size).reshape(-1))
    return ray_to_plucker(o, d)


PLANES = ("xy", "yz", "zx")


def grid_centers(n: int) -> np.ndarray:
    return -1.0 + 2.0 * (np.arange(n) + 0.5) / n


def pluckerf_lines(n: int) -> PluckerLine:
    """The ``3 n^2`` lines orthogonal to the xy, yz and zx feature planes.

    Token ``p * n^2 + i * n + j`` is pixel (i, j) of plane ``p``; i indexes
    the plane's first axis.  Directions: +z for xy, +x for yz, +y for zx.
    """
    if n < 1:
        raise GeometryError("grid size must be >= 1")
    c = grid_centers(n)
    a, b = (g.reshape(-1) for g in np.meshgrid(c, c, indexing="ij"))
    zero = np.zeros_like(a)
    origins = np.concatenate([
        np.stack([a, b, zero], axis=1),   # xy: (x, y) = (a, b)
        np.stack([zero, a, b], axis=1),   # yz: (y, z) = (a, b)
        np.stack([b, zero, a], axis=1),   # zx: (z, x) = (a, b)
    ])
    dirs = np.repeat(np.eye(3)[[2, 0, 1]], n * n, axis=0)
    return ray_to_plucker(origins, dirs)


def distance_matrix(queries: PluckerLine, keys: PluckerLine, cls_flags=None) -> DistanceBias:
    """Distances from every query line to every key line; CLS columns forced to 0."""
    nk = len(keys)
    flags = np.zeros(nk, dtype=bool) if cls_flags is None else np.asarray(cls_flags, dtype=bool)
    values = line_distance(PluckerLine(queries.d[:, None], queries.m[:, None]),
                           PluckerLine(keys.d[None], keys.m[None]))
    values = np.ascontiguousarray(values)
    values[:, flags] = 0.0
    return DistanceBias(values, flags)


def relative_poses(cameras: Sequence[Camera]) -> list[Camera]:
    """Express every camera in the frame of ``cameras[0]``."""
    if not cameras:
        raise GeometryError("relative_poses needs at least one camera")
    R0, t0 = cameras[0].R, cameras[0].t
    out = [replace(c, R=R0.T @ c.R, t=R0.T @ (c.t - t0)) for c in cameras]
    out[0] = replace(out[0], R=np.eye(3), t=np.zeros(3))
    return out


def canonical_cameras(cameras: Sequence[Camera], distance: float | None = None) -> list[Camera]:
    """Relative poses, shifted so the first camera sits at ``(0, 0, -distance)``.

    With cameras that look at the world origin (SRN and the synthetic data)
    the object centre lands at the origin of the rendering box.
    """
    if distance is None:
        distance = float(np.linalg.norm(cameras[0].t))
    shift = np.array([0.0, 0.0, distance])
    return [replace(c, t=c.t - shift) for c in relative_poses(cameras)]


def rotation_angle(R1, R2) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    cos = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
