"""Novel-view evaluation with fixed input views."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .geometry import canonical_cameras, rotation_angle
from .metrics import extrapolated_subset, psnr, ssim
from .model import TriplaneReconstructor
from .renderer import RaySampling, render_image

METRIC_COLUMNS = ["scene_id", "view_id", "psnr", "ssim", "is_extrapolated"]


@dataclass
class ViewResult:
    scene_id: str
    view_id: int
    psnr: float
    ssim: float
    is_extrapolated: bool
    min_angle: float


def default_input_views(n_views: int) -> list[int]:
    """Views 64 and 128 when the scene has them, otherwise 0 and n/2."""
    if n_views > 128:
        return [64, 128]
    return [0, n_views // 2] if n_views > 1 else [0]


def reconstruct(model: TriplaneReconstructor, scene, input_ids: Sequence[int]):
    """Field and canonical cameras for all views, conditioned on ``input_ids``."""
    order = list(input_ids) + [v for v in range(len(scene.views)) if v not in set(input_ids)]
    cams = canonical_cameras([scene.views[v].camera for v in order])
    by_view = dict(zip(order, cams))
    field = model.forward([scene.views[v].image for v in input_ids], [by_view[v] for v in input_ids])
    return field, [by_view[v] for v in range(len(scene.views))]


def evaluate_scene(model: TriplaneReconstructor, scene, input_ids: Sequence[int],
                   sampling: Optional[RaySampling] = None, view_ids: Optional[Sequence[int]] = None,
                   debug_ground_truth: bool = False) -> list[ViewResult]:
    """PSNR/SSIM on every non-input view (or ``view_ids``).

    ``debug_ground_truth`` scores each ground-truth image against itself.
    """
    n = len(scene.views)
    if max(input_ids) >= n:
        raise DataError(f"scene {scene.id} has {n} views, input ids {list(input_ids)} requested")
    rots = [v.camera.R for v in scene.views]
    extra = set(extrapolated_subset(rots, input_ids))
    targets = [v for v in range(n) if v not in set(input_ids)] if view_ids is None else list(view_ids)
    field, cams = (None, None) if debug_ground_truth else reconstruct(model, scene, input_ids)
    results = []
    for v in targets:
        truth = scene.views[v].image
        pred = truth if debug_ground_truth else render_image(cams[v], field, sampling=sampling)
        angle = min(rotation_angle(rots[v], rots[i]) for i in input_ids)
        results.append(ViewResult(scene.id, v, psnr(pred, truth), ssim(pred, truth), v in extra, angle))
    return results


def summarize(results: Sequence[ViewResult]) -> list[dict]:
    rows = []
    for subset, picked in (("all", list(results)), ("extrapolated", [r for r in results if r.is_extrapolated])):
        rows.append({
            "subset": subset,
            "count": len(picked),
            "psnr": float(np.mean([r.psnr for r in picked])) if picked else float("nan"),
            "ssim": float(np.mean([r.ssim for r in picked])) if picked else float("nan"),
        })
    return rows


def write_metrics(path: str | os.PathLike, results: Sequence[ViewResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in results:
            w.writerow([r.scene_id, r.view_id, repr(r.psnr), repr(r.ssim), int(r.is_extrapolated)])


def write_summary(path: str | os.PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["subset", "count", "psnr", "ssim"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
