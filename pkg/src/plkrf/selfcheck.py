"""Geometry, gradient and compositing checks runnable from the command line."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from . import renderer as rd
from .model import biased_attention
from .tensor import (Tensor, concat, exp, gelu, getitem, grad_check, layer_norm, log, matmul,
                     sigmoid, softmax_lastdim, softplus, square, tanh, transposed_conv_2x, tsum)

GRAD_TOL = 1e-5
DIST_TOL = 1e-7


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _lstsq_distance(o1, d1, o2, d2) -> float:
    A = np.stack([d1, -d2], axis=1)
    (s, t), *_ = np.linalg.lstsq(A, o2 - o1, rcond=None)
    return float(np.linalg.norm(o1 + s * d1 - o2 - t * d2))


def check_line_distance(distance: Callable = geo.line_distance, pairs: int = 2000, seed: int = 0) -> Check:
    """Distance formula against closest points from least squares, plus parallel pairs."""
    rng = np.random.default_rng(seed)
    o1, o2 = rng.uniform(-3, 3, (2, pairs, 3))
    d1, d2 = _unit(rng, pairs), _unit(rng, pairs)
    # keep the least-squares oracle well conditioned
    keep = np.linalg.norm(np.cross(d1, d2), axis=1) > 0.05
    o1, o2, d1, d2 = o1[keep], o2[keep], d1[keep], d2[keep]
    got = np.asarray(distance(geo.ray_to_plucker(o1, d1), geo.ray_to_plucker(o2, d2)))
    want = np.array([_lstsq_distance(*args) for args in zip(o1, d1, o2, d2)])
    err = float(np.max(np.abs(got - want)))
    # parallel and anti-parallel lines at a known offset
    off = np.cross(d1[:200], _unit(rng, 200))
    off *= (rng.uniform(0.1, 2.0, 200) / np.linalg.norm(off, axis=1))[:, None]
    sign = np.where(rng.random(200) < 0.5, -1.0, 1.0)[:, None]
    par = np.asarray(distance(geo.ray_to_plucker(o1[:200], d1[:200]),
                              geo.ray_to_plucker(o1[:200] + off, sign * d1[:200])))
    err_par = float(np.max(np.abs(par - np.linalg.norm(off, axis=1))))
    worst = max(err, err_par)
    return Check("line_distance_oracle", bool(np.isfinite(worst) and worst <= DIST_TOL),
                 f"max abs error {worst:.2e} over {len(got)} skew + 200 parallel pairs")


def check_origin_invariance(rays: int = 1000, seed: int = 1) -> Check:
    rng = np.random.default_rng(seed)
    o = rng.uniform(-5, 5, (rays, 3))
    d = rng.normal(size=(rays, 3))
    a = geo.ray_to_plucker(o, d)
    b = geo.ray_to_plucker(o + rng.uniform(-10, 10, (rays, 1)) * a.d, d)
    shift = float(np.max(np.abs(a.m - b.m)))
    ortho = float(np.max(np.abs(np.einsum("ij,ij->i", a.d, a.m))))
    ok = shift <= 1e-12 and ortho <= 1e-12
    return Check("plucker_origin_invariance", ok, f"moment shift {shift:.1e}, max |d.m| {ortho:.1e}")


def gradient_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Tensor]]:
    """Toy-size scalar functions covering every differentiable op."""
    x = Tensor(rng.normal(size=(3, 4)))
    w34 = rng.normal(size=(3, 4))
    w_cat = rng.normal(size=(6, 4))
    b = Tensor(rng.normal(size=(4, 2)))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    g, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    grid = Tensor(rng.normal(size=(3, 3, 3, 2)))
    conv_x = Tensor(rng.normal(size=(2, 2, 2)))
    kern = Tensor(rng.normal(size=(2, 3, 2, 2)))
    q, k, v = (Tensor(rng.normal(size=(2, n, 4))) for n in (3, 5, 5))
    D = rng.random((3, 5))
    gamma = Tensor(np.array(0.7))
    colors = Tensor(rng.random((2, 5, 3)))
    sigmas = Tensor(rng.exponential(2.0, (2, 5)))
    deltas = rng.uniform(0.05, 0.3, (2, 5))
    pts = rng.uniform(-1, 1, (6, 3))
    dec = rd.init_decoder(2, 4, rng)
    wc = rng.normal(size=(3, 4, 4))
    cases = [
        ("add_mul", lambda t: tsum((t + t * t) * w34), x),
        ("div", lambda t: tsum((x / t) * w34), pos),
        ("matmul", lambda t: tsum(square(matmul(x, t))), b),
        ("exp", lambda t: tsum(exp(t) * w34), x),
        ("log", lambda t: tsum(log(t) * w34), pos),
        ("tanh", lambda t: tsum(tanh(t) * w34), x),
        ("sigmoid", lambda t: tsum(sigmoid(t) * w34), x),
        ("softplus", lambda t: tsum(softplus(t) * w34), x),
        ("gelu", lambda t: tsum(gelu(t) * w34), x),
        ("softmax", lambda t: tsum(softmax_lastdim(t) * w34), x),
        ("layer_norm", lambda t: tsum(layer_norm(t, g, beta) * w34), x),
        ("shape_ops", lambda t: tsum(square(concat([t, getitem(t, (slice(None), [0, 0, 2, 3]))], 0)) * w_cat), x),
        ("transposed_conv", lambda t: tsum(transposed_conv_2x(conv_x, t) * wc), kern),
        ("biased_attention_q", lambda t: tsum(square(biased_attention(t, k, v, D, gamma))), q),
        ("biased_attention_gamma", lambda t: tsum(square(biased_attention(q, k, v, D, t))), gamma),
        ("triplane_sampling", lambda t: tsum(square(rd.point_features(pts, rd.TriplaneField(t, dec)))), grid),
        ("composite_colour", lambda t: tsum(square(rd.composite(t, sigmas, deltas, np.ones(3))[0])), colors),
        ("composite_density", lambda t: tsum(square(rd.composite(colors, t, deltas, np.ones(3))[0])), sigmas),
    ]
    return cases


def check_gradients(seed: int = 2) -> tuple[list[Check], float]:
    rng = np.random.default_rng(seed)
    out, worst = [], 0.0
    for name, f, x in gradient_cases(rng):
        err = grad_check(f, x)
        worst = max(worst, err)
        out.append(Check(f"grad:{name}", bool(np.isfinite(err) and err <= GRAD_TOL), f"rel err {err:.1e}"))
    return out, worst


def check_conservation(rays: int = 1000, seed: int = 3) -> Check:
    rng = np.random.default_rng(seed)
    r = 48
    sig = rng.exponential(3.0, (rays, r))
    deltas = rng.uniform(0.001, 0.2, (rays, r))
    _, acc = rd.composite(Tensor(np.zeros((rays, r, 3))), Tensor(sig), deltas, np.zeros(3))
    t_final = np.exp(-np.sum(sig * deltas, axis=1))
    err = float(np.max(np.abs(acc + t_final - 1.0)))
    return Check("compositing_conservation", err <= 1e-12, f"max |sum T a + T_final - 1| {err:.1e}")


def run_all(distance: Optional[Callable] = None) -> tuple[list[Check], float]:
    """All checks; ``distance`` swaps in another line-distance implementation."""
    checks = [check_line_distance(distance or geo.line_distance), check_origin_invariance()]
    grads, worst = check_gradients()
    checks += grads
    checks.append(check_conservation())
    return checks, worst


def report(checks: list[Check], worst_grad: float) -> str:
    lines = [f"{'PASS' if c.passed else 'FAIL'}  {c.name}  {c.detail}" for c in checks]
    lines.append(f"max gradient rel err {worst_grad:.2e}")
    failed = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - failed}/{len(checks)} checks passed")
    return "\n".join(lines)
