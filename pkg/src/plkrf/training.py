"""Reconstruction loss, the n-input / k-target training step and the run loop."""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import checkpoint
from .errors import ConfigError, ContractError, DataError, NumericError
from .geometry import canonical_cameras, pixel_ray
from .model import ModelConfig, TriplaneReconstructor
from .optim import OptimizerState, adamw_step
from .renderer import RaySampling, render_rays
from .tensor import Tape, Tensor, as_tensor, backward, getitem, mean, square

log = logging.getLogger(__name__)

Perceptual = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class TrainConfig:
    """Training schedule and supervision.

    Defaults are desk scale.  :meth:`paper_scale` restores the published
    schedule (2500 warm-up steps, peak lr 4e-4, alpha 0.01 late in training).
    """

    n_inputs: int = 2
    n_targets: int = 2
    alpha: float = 0.0
    alpha_start_step: int = 0
    total_steps: int = 2000
    warmup: int = 100
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    rays_per_view: int = 128
    samples: int = 64
    stratified: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    grad_accum: int = 1
    checkpoint_every: int = 500
    seed: int = 0
    input_views: Optional[list[int]] = None
    target_views: Optional[list[int]] = None
    holdout_views: list[int] = field(default_factory=list)

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(total_steps=800_000, warmup=2500, base_lr=4e-4, alpha=0.01, alpha_start_step=650_000)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.n_inputs < 1 or self.n_targets < 0 or self.alpha < 0:
            raise ConfigError("need n_inputs >= 1, n_targets >= 0, alpha >= 0")
        if self.rays_per_view < 1 or self.samples < 1 or self.grad_accum < 1:
            raise ConfigError("rays_per_view, samples and grad_accum must be positive")
        if self.total_steps < 0 or self.warmup < 0:
            raise ConfigError("step counts must be non-negative")

    def alpha_at(self, step: int) -> float:
        return self.alpha if step >= self.alpha_start_step else 0.0

    def sampling(self) -> RaySampling:
        return RaySampling(self.samples, self.stratified, tuple(self.background))


@dataclass
class TrainState:
    model: TriplaneReconstructor
    optimizer: OptimizerState
    step: int = 0
    losses: list[float] = field(default_factory=list)


def reconstruction_loss(rendered: Sequence[Tensor], truth: Sequence[np.ndarray], alpha: float = 0.0,
                        perceptual: Optional[Perceptual] = None) -> Tensor:
    """Mean over views of per-view pixel MSE plus ``alpha`` times a perceptual term.

    The perceptual term is zero unless a ``perceptual`` callable is supplied.
    """
    if len(rendered) != len(truth) or not rendered:
        raise ContractError(f"{len(rendered)} rendered views vs {len(truth)} ground-truth views")
    total = None
    for x_hat, x in zip(rendered, truth):
        x_hat = as_tensor(x_hat)
        x = np.asarray(x, dtype=x_hat.dtype)
        if x_hat.shape != x.shape:
            raise ContractError(f"rendered shape {x_hat.shape} vs truth {x.shape}")
        term = mean(square(x_hat - x))
        if alpha and perceptual is not None:
            term = term + alpha * perceptual(x_hat, x)
        total = term if total is None else total + term
    return total * (1.0 / len(rendered))


def new_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    model = TriplaneReconstructor(model_config)
    opt = OptimizerState(base_lr=config.base_lr, beta1=config.beta1, beta2=config.beta2,
                         weight_decay=config.weight_decay, warmup=config.warmup,
                         total_steps=config.total_steps)
    return TrainState(model, opt)


def choose_views(n_views: int, config: TrainConfig, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Input and target view indices for one step, sampled without replacement."""
    pool = [v for v in range(n_views) if v not in set(config.holdout_views)]
    inputs = list(config.input_views) if config.input_views is not None else None
    targets = list(config.target_views) if config.target_views is not None else None
    need = (0 if inputs is not None else config.n_inputs) + (0 if targets is not None else config.n_targets)
    free = [v for v in pool if v not in set(inputs or []) | set(targets or [])]
    if len(free) < need:
        raise DataError(f"scene has {n_views} views; step needs {config.n_inputs} inputs + {config.n_targets} targets")
    picked = [free[i] for i in rng.permutation(len(free))[:need]]
    if inputs is None:
        inputs, picked = picked[:config.n_inputs], picked[config.n_inputs:]
    if targets is None:
        targets = picked[:config.n_targets]
    return inputs, targets


def supervision_rays(scene, view_ids: Sequence[int], cameras, rays_per_view: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Random pixel rays per view (canonical frame) and their ground-truth colours."""
    origins, dirs, truth = [], [], []
    for vid, cam in zip(view_ids, cameras):
        img = scene.views[vid].image
        h, w = img.shape[:2]
        pix = rng.choice(h * w, size=min(rays_per_view, h * w), replace=False)
        rows, cols = np.divmod(pix, w)
        o, d = pixel_ray(cam, cols + 0.5, rows + 0.5)
        origins.append(o)
        dirs.append(d)
        truth.append(img.reshape(-1, 3)[pix])
    return np.concatenate(origins), np.concatenate(dirs), truth


def step_loss(scene, state: TrainState, config: TrainConfig, rng: np.random.Generator,
              perceptual: Optional[Perceptual] = None) -> Tensor:
    """Forward pass and loss for one scene; must run inside an active tape."""
    model = state.model
    inputs, targets = choose_views(len(scene.views), config, rng)
    sup = inputs + targets
    cams = canonical_cameras([scene.views[v].camera for v in sup])
    field = model.forward([scene.views[v].image for v in inputs], cams[:len(inputs)])
    origins, dirs, truth = supervision_rays(scene, sup, cams, config.rays_per_view, rng)
    rgb, _ = render_rays(field, origins, dirs, config.sampling(), rng)
    bounds = np.cumsum([0] + [t.shape[0] for t in truth])
    rendered = [getitem(rgb, slice(bounds[i], bounds[i + 1])) for i in range(len(truth))]
    return reconstruction_loss(rendered, truth, config.alpha_at(state.step), perceptual)


def train_step(scenes, state: TrainState, config: TrainConfig, rng: Optional[np.random.Generator] = None,
               perceptual: Optional[Perceptual] = None) -> float:
    """One optimizer update; ``scenes`` is a scene or a list (gradient accumulation)."""
    if not isinstance(scenes, (list, tuple)):
        scenes = [scenes]
    rng = rng if rng is not None else np.random.default_rng([config.seed, 2, state.step])
    model = state.model
    model.zero_grad()
    total = 0.0
    for scene in scenes:
        with Tape() as tape:
            loss = step_loss(scene, state, config, rng, perceptual)
            if len(scenes) > 1:
                loss = loss * (1.0 / len(scenes))
        value = loss.item()
        if not np.isfinite(value):
            tape.clear()
            raise NumericError(f"non-finite loss at step {state.step + 1}")
        backward(loss, tape)
        total += value
    params = model.trainable()
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    adamw_step(params, grads, state.optimizer)
    state.step += 1
    state.losses.append(total)
    return total


# ---------------------------------------------------------------- run loop


def checkpoint_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = dict(state.model.state_arrays())
    opt = state.optimizer
    arrays["optim/step"] = np.array(float(opt.step))
    arrays["train/step"] = np.array(float(state.step))
    for name, m in opt.exp_avg.items():
        arrays[f"optim/m/{name}"] = m
        arrays[f"optim/v/{name}"] = opt.exp_avg_sq[name]
    return arrays


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    checkpoint.save_arrays(path, checkpoint_arrays(state))


def load_checkpoint(path: str | os.PathLike, model_config: ModelConfig, config: TrainConfig) -> TrainState:
    arrays = checkpoint.load_arrays(path)
    state = new_state(model_config, config)
    state.model.load_arrays(arrays)
    state.step = int(arrays.get("train/step", np.array(0.0)))
    state.optimizer.step = int(arrays.get("optim/step", np.array(0.0)))
    for key, arr in arrays.items():
        if key.startswith("optim/m/"):
            state.optimizer.exp_avg[key[len("optim/m/"):]] = np.array(arr)
        elif key.startswith("optim/v/"):
            state.optimizer.exp_avg_sq[key[len("optim/v/"):]] = np.array(arr)
    return state


def scenes_for_step(n_scenes: int, step: int, accum: int, seed: int) -> list[int]:
    """Scene indices for update ``step`` (0-based), from a per-epoch shuffle."""
    out = []
    for k in range(accum):
        flat = step * accum + k
        epoch, pos = divmod(flat, n_scenes)
        out.append(int(np.random.default_rng([seed, 1, epoch]).permutation(n_scenes)[pos]))
    return out


def log_columns(model: TriplaneReconstructor) -> list[str]:
    return ["step", "lr", "loss"] + [f"gamma:{k}" for k in model.gammas()]


def run(dataset: Sequence, model_config: ModelConfig, config: TrainConfig, out_dir: str | os.PathLike,
        resume: Optional[str | os.PathLike] = None, stop_at: Optional[int] = None,
        perceptual: Optional[Perceptual] = None) -> TrainState:
    """Train over ``dataset`` writing checkpoints and a per-step CSV log to ``out_dir``.

    ``stop_at`` ends the loop early (same schedule as the full run), which is
    how an interrupted run is emulated.
    """
    config.validate()
    if not dataset:
        raise DataError("training dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(resume, model_config, config) if resume else new_state(model_config, config)
    log_path = out / "train_log.csv"
    columns = log_columns(state.model)
    if not resume:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(columns)
        save_checkpoint(state, out / f"ckpt_{0:07d}.plkrf")
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    with open(log_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < end:
            idx = scenes_for_step(len(dataset), state.step, config.grad_accum, config.seed)
            lr = state.optimizer.lr()
            loss = train_step([dataset[i] for i in idx], state, config, perceptual=perceptual)
            gam = state.model.gammas()
            writer.writerow([state.step, repr(lr), repr(loss)] + [repr(g) for g in gam.values()])
            if state.step % 50 == 0:
                fh.flush()
                log.info("step %d lr %.3g loss %.5f", state.step, lr, loss)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{state.step:07d}.plkrf")
    save_checkpoint(state, out / "ckpt_latest.plkrf")
    return state


def read_log(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    return {name: cols[:, i] for i, name in enumerate(header)}


def config_dict(model_config: ModelConfig, config: TrainConfig) -> dict:
    return {"model": asdict(model_config), "train": asdict(config)}


def write_config_echo(path: str | os.PathLike, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
