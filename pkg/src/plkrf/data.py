"""Synthetic posed scenes and the SRN on-disk layout.

SRN layout, one folder per instance::

    <instance>/intrinsics.txt   f cx cy 0 / bx by bz / scale / height width
    <instance>/pose/NNNNNN.txt  16 numbers, row-major 4x4 camera-to-world
    <instance>/rgb/NNNNNN.png   8-bit RGB(A)

Poses and images pair by sorted filename stem.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, IngestionError
from .geometry import Camera, look_at, pixel_centers, pixel_ray


@dataclass
class View:
    image: np.ndarray
    camera: Camera


@dataclass
class SceneInstance:
    id: str
    views: list[View]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.views)

    @property
    def images(self) -> list[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]


@dataclass
class Primitive:
    kind: str                 # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray          # radius (sphere) or half extents (box)
    color: np.ndarray


@dataclass
class SynthSpec:
    min_primitives: int = 1
    max_primitives: int = 3
    kinds: tuple[str, ...] = ("box", "sphere")
    palette: tuple[tuple[float, float, float], ...] = (
        (0.85, 0.15, 0.15), (0.15, 0.6, 0.2), (0.15, 0.3, 0.85),
        (0.95, 0.75, 0.1), (0.6, 0.2, 0.7), (0.1, 0.7, 0.75),
    )
    bounds: float = 0.7
    min_size: float = 0.2
    max_size: float = 0.45
    radius: float = 3.0
    elevation: float = 25.0
    layout: str = "ring"      # "ring": even azimuths at fixed elevation; "sphere": random upper hemisphere
    views: int = 8
    resolution: int = 64
    focal_scale: float = 1.1  # focal length in units of image width
    supersample: int = 3

    def validate(self) -> None:
        if not 0 <= self.min_primitives <= self.max_primitives:
            raise ConfigError("primitive count range is empty")
        if not 0 < self.bounds <= 0.7:
            raise ConfigError("placement bounds must lie within [-0.7, 0.7]")
        if self.views < 1 or self.resolution < 1:
            raise ConfigError("need at least one view and pixel")
        if self.layout not in ("ring", "sphere"):
            raise ConfigError(f"unknown camera layout {self.layout!r}")
        if set(self.kinds) - {"box", "sphere"}:
            raise ConfigError(f"unknown primitive kinds {self.kinds}")


def ring_cameras(count: int, radius: float, elevation: float, resolution: int, focal: float,
                 azimuth0: float = 0.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth at fixed elevation, looking at the origin."""
    K = np.array([[focal, 0.0, resolution / 2.0], [0.0, focal, resolution / 2.0], [0.0, 0.0, 1.0]])
    el = np.deg2rad(elevation)
    cams = []
    for k in range(count):
        az = np.deg2rad(azimuth0) + 2.0 * np.pi * k / count
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(K, look_at(eye), eye, resolution, resolution))
    return cams


def sphere_cameras(count: int, radius: float, resolution: int, focal: float,
                   rng: np.random.Generator) -> list[Camera]:
    K = np.array([[focal, 0.0, resolution / 2.0], [0.0, focal, resolution / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for _ in range(count):
        v = rng.normal(size=3)
        v[2] = abs(v[2]) + 0.1
        eye = radius * v / np.linalg.norm(v)
        cams.append(Camera(K, look_at(eye), eye, resolution, resolution))
    return cams


def place_primitives(spec: SynthSpec, rng: np.random.Generator) -> list[Primitive]:
    count = int(rng.integers(spec.min_primitives, spec.max_primitives + 1))
    prims = []
    for _ in range(count):
        kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
        if kind == "sphere":
            size = np.full(3, rng.uniform(spec.min_size, spec.max_size))
        else:
            size = rng.uniform(spec.min_size, spec.max_size, 3)
        size = np.minimum(size, spec.bounds)
        center = rng.uniform(-(spec.bounds - size), spec.bounds - size)
        color = np.asarray(spec.palette[int(rng.integers(len(spec.palette)))], dtype=np.float64)
        prims.append(Primitive(kind, center, size, color))
    return prims


def _hit_depth(prim: Primitive, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Nearest positive hit distance per ray, inf on a miss."""
    if prim.kind == "sphere":
        oc = o - prim.center
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - prim.size[0] ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 0, t0, t1)
        return np.where((disc >= 0) & (t > 0), t, np.inf)
    lo, hi = prim.center - prim.size, prim.center + prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (lo - o) / d
        b = (hi - o) / d
    near = np.nan_to_num(np.fmin(a, b), nan=-np.inf).max(axis=1)
    far = np.nan_to_num(np.fmax(a, b), nan=np.inf).min(axis=1)
    t = np.where(near > 0, near, far)
    return np.where((far >= near) & (t > 0), t, np.inf)


def raycast(prims: list[Primitive], camera: Camera, supersample: int = 1,
            background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Analytic flat-shaded render: colour of the nearest primitive hit per sub-ray."""
    s = supersample
    w, h = camera.width, camera.height
    u, v = pixel_centers(w * s, h * s)
    o, d = pixel_ray(camera, u / s, v / s)
    depth = np.full(u.shape, np.inf)
    color = np.broadcast_to(np.asarray(background, dtype=np.float64), (u.size, 3)).copy()
    for prim in prims:
        t = _hit_depth(prim, o, d)
        closer = t < depth
        depth[closer] = t[closer]
        color[closer] = prim.color
    img = color.reshape(h, s, w, s, 3).mean(axis=(1, 3)) if s > 1 else color.reshape(h, w, 3)
    return quantize(img)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so images survive PNG round trips bit-exactly."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_scene(spec: SynthSpec, seed: int, scene_id: Optional[str] = None,
                   split: str = "train") -> SceneInstance:
    """Random primitives inside the box, rendered analytically from every camera."""
    spec.validate()
    rng = np.random.default_rng(seed)
    prims = place_primitives(spec, rng)
    focal = spec.focal_scale * spec.resolution
    if spec.layout == "ring":
        cams = ring_cameras(spec.views, spec.radius, spec.elevation, spec.resolution, focal,
                            azimuth0=float(rng.uniform(0.0, 360.0)))
    else:
        cams = sphere_cameras(spec.views, spec.radius, spec.resolution, focal, rng)
    views = [View(raycast(prims, cam, spec.supersample), cam) for cam in cams]
    return SceneInstance(scene_id or f"scene{seed:06d}", views, split)


# ------------------------------------------------------------------ SRN I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_srn(scene: SceneInstance, instance_dir: str | os.PathLike) -> Path:
    """Export a scene in SRN layout; floats are written with round-trip precision."""
    root = Path(instance_dir)
    (root / "pose").mkdir(parents=True, exist_ok=True)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    cam0 = scene.views[0].camera
    K = cam0.K
    lines = [
        " ".join(_fmt(x) for x in (K[0, 0], K[0, 2], K[1, 2], 0.0)),
        "0.0 0.0 0.0",
        "1.0",
        f"{cam0.height} {cam0.width}",
    ]
    (root / "intrinsics.txt").write_text("\n".join(lines) + "\n")
    for i, view in enumerate(scene.views):
        pose = view.camera.pose
        (root / "pose" / f"{i:06d}.txt").write_text(" ".join(_fmt(x) for x in pose.reshape(-1)) + "\n")
        arr = np.round(view.image * 255.0).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / "rgb" / f"{i:06d}.png")
    return root


def _read_numbers(path: Path) -> list[list[float]]:
    try:
        return [[float(tok) for tok in line.split()] for line in path.read_text().splitlines() if line.strip()]
    except (OSError, ValueError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc


def read_intrinsics(path: Path) -> tuple[np.ndarray, int, int]:
    rows = _read_numbers(path)
    if len(rows) < 3 or len(rows[0]) < 3 or len(rows[-1]) != 2:
        raise IngestionError(f"{path}: expected 'f cx cy 0' ... 'height width' layout")
    f, cx, cy = rows[0][:3]
    height, width = (int(x) for x in rows[-1])
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    return K, width, height


def read_pose(path: Path) -> np.ndarray:
    vals = [x for row in _read_numbers(path) for x in row]
    if len(vals) != 16:
        raise IngestionError(f"{path}: expected 16 numbers for a 4x4 pose, found {len(vals)}")
    return np.array(vals).reshape(4, 4)


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    return arr[..., :3].astype(np.float64) / 255.0


def load_instance(instance_dir: str | os.PathLike, split: str = "train") -> SceneInstance:
    root = Path(instance_dir)
    intr = root / "intrinsics.txt"
    if not intr.is_file():
        raise IngestionError(f"{intr}: missing")
    K, width, height = read_intrinsics(intr)
    poses = sorted((root / "pose").glob("*.txt"))
    images = sorted((root / "rgb").glob("*.png"))
    if [p.stem for p in poses] != [p.stem for p in images]:
        raise IngestionError(f"{root}: pose/ and rgb/ file stems do not pair up")
    views = []
    for pose_path, img_path in zip(poses, images):
        pose = read_pose(pose_path)
        img = read_image(img_path)
        if img.shape[:2] != (height, width):
            if img.shape[0] != img.shape[1] or height != width:
                raise IngestionError(f"{img_path}: size {img.shape[:2]} vs intrinsics {(height, width)}")
            # intrinsics given at a different square resolution: rescale K
            scale = img.shape[0] / height
            K = K.copy()
            K[:2] *= scale
            width = height = img.shape[0]
        views.append(View(img, Camera(K, pose[:3, :3], pose[:3, 3], width, height)))
    return SceneInstance(root.name, views, split)


def split_dir(root: str | os.PathLike, split: str) -> Optional[Path]:
    """``root/split`` or an SRN-style ``root/*_split`` folder, if present."""
    root = Path(root)
    if (root / split).is_dir():
        return root / split
    matches = sorted(p for p in root.glob(f"*_{split}") if p.is_dir())
    return matches[0] if matches else None


def load_srn(root: str | os.PathLike, split: str = "train") -> list[SceneInstance]:
    """All instances of one split; an empty or absent split yields ``[]``."""
    root = Path(root)
    if not root.exists():
        raise IngestionError(f"{root}: dataset root does not exist")
    folder = split_dir(root, split)
    if folder is None:
        return []
    return [load_instance(p, split) for p in sorted(folder.iterdir()) if p.is_dir()]


def export_dataset(root: str | os.PathLike, spec: SynthSpec, counts: dict[str, int], seed: int) -> Path:
    """Generate scenes for each split and write them in SRN layout."""
    root = Path(root)
    offset = {"train": 0, "val": 1_000_000, "test": 2_000_000}
    for split, count in counts.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        for k in range(count):
            scene_seed = seed * 10_000_000 + offset.get(split, 3_000_000) + k
            scene = generate_scene(spec, scene_seed, f"{split}{k:05d}", split)
            write_srn(scene, root / split / scene.id)
    return root


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
