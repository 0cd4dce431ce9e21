"""Fit field and medium parameters to posed underwater images with Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .diff import ContractError, NumericError, Tape
from .field import (
    Architecture,
    FieldParams,
    MediumParams,
    NeuralField,
    init_field_params,
    medium_vars,
    with_input_transform,
)
from .render import RayBatch, RenderConfig, samples_for, trace_rays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_rays: int = 1024
    learning_rate: float = 5e-3
    final_learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    samples_per_ray: int = 64
    jitter: bool = True
    init_c_med: float = 0.5
    init_sigma_bs: float = 0.1
    init_sigma_attn: float = 0.1

    def __post_init__(self):
        if self.steps < 0 or self.batch_rays < 1 or self.samples_per_ray < 1:
            raise ContractError("counts must be positive")
        if self.learning_rate < 0 or self.final_learning_rate < 0:
            raise ContractError("learning rates must be >= 0")

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``learning_rate`` to ``final_learning_rate``."""
        if self.steps <= 1:
            return self.learning_rate
        frac = step / (self.steps - 1)
        lo, hi = self.final_learning_rate, self.learning_rate
        if hi == 0:
            return 0.0
        return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    params: FieldParams
    medium: MediumParams
    losses: list[float] = field(default_factory=list)


def loss_batch(params: FieldParams, medium: MediumParams, rays: RayBatch, gt: np.ndarray, config: RenderConfig, rng=None):
    """Mean squared colour error over the batch and its gradient.

    Returns ``(loss, grads)`` with ``grads`` keyed like the parameter blocks
    plus ``medium.c`` / ``medium.bs`` / ``medium.attn``.
    """
    gt = np.asarray(gt)
    if gt.shape != (len(rays), 3):
        raise ContractError("rays and ground-truth colours are not aligned")
    dtype = params.dtype.type
    tape = Tape(dtype)
    f = NeuralField(params).bind(tape)
    mv = medium_vars(tape, medium, trainable=True)
    samples = samples_for(rays, config, rng=rng)
    tr = trace_rays(tape, f, mv, rays, samples, "full", config.bounds)
    resid = tr.outputs["color"] - gt.astype(dtype)
    loss = (resid * resid).sum() * (1.0 / len(rays))
    value = float(loss.value)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} on a batch of {len(rays)} rays")
    names = list(f.weights) + list(medium.blocks())
    leaves = list(f.weights.values()) + list(mv.leaves)
    grads = tape.backward(loss, 1.0, leaves)
    return value, dict(zip(names, grads))


class Adam:
    def __init__(self, shapes: dict[str, tuple], config: TrainConfig, dtype):
        self.config = config
        self.m = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.t = 0

    def step(self, values: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        c = self.config
        self.t += 1
        bc1 = 1 - c.beta1**self.t
        bc2 = 1 - c.beta2**self.t
        out = {}
        for k, value in values.items():
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.epsilon)
            out[k] = (value - lr * update).astype(value.dtype)
        return out


class TrainingDiverged(NumericError):
    """Raised when the loss turns non-finite; carries the last good state."""

    def __init__(self, message: str, last_good: TrainResult):
        super().__init__(message)
        self.last_good = last_good


def training_rays(dataset: Dataset) -> tuple[RayBatch, np.ndarray]:
    """Every train pixel's ray and colour, views in order, pixels row-major."""
    parts, colors = [], []
    for i in dataset.views("train"):
        parts.append(dataset.cameras[i].rays(dataset.near, dataset.far))
        colors.append(dataset.images[i].reshape(-1, 3))
    rays = RayBatch(
        np.concatenate([p.origins for p in parts]),
        np.concatenate([p.dirs for p in parts]),
        np.concatenate([p.near for p in parts]),
        np.concatenate([p.far for p in parts]),
    )
    return rays, np.concatenate(colors)


def initial_state(dataset: Dataset, config: TrainConfig, arch: Architecture | None = None):
    arch = with_input_transform(arch or Architecture(), dataset.bounds)
    params = init_field_params(arch, config.seed, np.float32)
    medium = MediumParams.from_values(config.init_c_med, config.init_sigma_bs, config.init_sigma_attn, np.float32)
    return params, medium


def render_config_for(dataset: Dataset, config: TrainConfig) -> RenderConfig:
    return RenderConfig(
        n_samples=config.samples_per_ray,
        jitter=config.jitter,
        t_near=dataset.near,
        t_far=dataset.far,
        bounds=dataset.bounds,
        seed=config.seed,
    )


def train(
    dataset: Dataset,
    config: TrainConfig,
    arch: Architecture | None = None,
    init: tuple[FieldParams, MediumParams] | None = None,
    log_every: int = 100,
) -> TrainResult:
    """Minimise the mean squared pixel error over random train rays.

    Rays are drawn uniformly with replacement from all train pixels.  Runs
    are deterministic given ``config.seed``.
    """
    params, medium = init if init is not None else initial_state(dataset, config, arch)
    all_rays, all_colors = training_rays(dataset)
    rcfg = render_config_for(dataset, config)
    rng = np.random.default_rng(config.seed)
    values = {**params.blocks, **medium.blocks()}
    opt = Adam({k: v.shape for k, v in values.items()}, config, params.dtype)
    losses: list[float] = []
    for step in range(config.steps):
        pick = rng.integers(0, len(all_rays), config.batch_rays)
        batch = all_rays[pick]
        try:
            loss, grads = loss_batch(params, medium, batch, all_colors[pick], rcfg, rng)
        except NumericError as exc:
            raise TrainingDiverged(f"step {step}: {exc}", TrainResult(params, medium, losses)) from exc
        losses.append(loss)
        values = opt.step(values, grads, config.lr_at(step))
        params = FieldParams(params.arch, {k: values[k] for k in params.blocks})
        medium = MediumParams(values["medium.c"], values["medium.bs"], values["medium.attn"])
        if log_every and (step % log_every == 0 or step == config.steps - 1):
            log.info("step %d loss %.6f", step, loss)
    return TrainResult(params, medium, losses)


def write_loss_csv(path, losses: list[float]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(v)])
