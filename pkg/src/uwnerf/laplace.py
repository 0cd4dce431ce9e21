"""Diagonal Laplace approximation over the displacement grid.

With a Gaussian pixel likelihood of variance 1/2 the expected curvature of
the negative log posterior at the mode is ``2 J^T J`` per ray, so each
vertex-axis entry of the Fisher diagonal is

    F = 2 * lam + (2 / R) * sum_rays sum_channels J^2

and its marginal variance is ``1 / F``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import ordered_map
from .dataset import Dataset
from .diff import ContractError
from .field import SceneBounds
from .perturb import PerturbGrid, cell_weights, ray_jacobians
from .render import RayBatch, RenderConfig, render_rays
from .trainer import training_rays

DEFAULT_GRID = 256


def default_lambda(m: int) -> float:
    return 1e-4 / m**3


@dataclass(frozen=True)
class UQConfig:
    iterations: int = 1000
    rays_per_iteration: int = 256
    lam: float | None = None  # None means 1e-4 / M^3
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.rays_per_iteration < 1:
            raise ContractError("counts must be positive")
        if self.lam is not None and not self.lam > 0:
            raise ContractError("lambda must be > 0")

    def lambda_for(self, m: int) -> float:
        return default_lambda(m) if self.lam is None else float(self.lam)


@dataclass
class FisherDiag:
    entries: np.ndarray  # (M^3, 3)
    ray_count: int
    lam: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.entries)):
            raise ContractError("Fisher entries must be finite")


def jtj_sums(field, medium, grid: PerturbGrid, rays: RayBatch, config: RenderConfig, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """Touched vertex ids and their per-axis sums of squared Jacobian entries."""
    jac = ray_jacobians(field, medium, grid, rays, config, dtype=dtype)
    sq = (jac.values.astype(np.float64) ** 2).sum(axis=-1)
    verts, inverse = np.unique(jac.vertex, return_inverse=True)
    sums = np.stack([np.bincount(inverse, sq[:, a], minlength=len(verts)) for a in range(3)], axis=-1)
    return verts, sums


def accumulate_fisher_rays(field, medium, grid: PerturbGrid, batches: list[RayBatch], config: RenderConfig, lam: float, threads: int = 1, dtype=None) -> FisherDiag:
    """Fisher diagonal from explicit ray batches, merged in batch order."""
    total = np.zeros((grid.m**3, 3), dtype=np.float64)
    count = sum(len(b) for b in batches)
    parts = ordered_map(lambda rb: jtj_sums(field, medium, grid, rb, config, dtype), batches, threads)
    for verts, sums in parts:
        total[verts] += sums
    entries = 2.0 * lam + (2.0 / max(count, 1)) * total
    return FisherDiag(entries, count, lam)


def draw_rays(dataset: Dataset, cfg: UQConfig) -> list[RayBatch]:
    """``iterations`` batches of train rays drawn uniformly with replacement."""
    rays, _ = training_rays(dataset)
    rng = np.random.default_rng(cfg.seed)
    picks = rng.integers(0, len(rays), (cfg.iterations, cfg.rays_per_iteration))
    return [rays[row] for row in picks]


def accumulate_fisher(field, medium, dataset: Dataset, grid: PerturbGrid, cfg: UQConfig, config: RenderConfig, threads: int = 1, dtype=None) -> FisherDiag:
    if not grid.is_zero:
        raise ContractError("Fisher accumulation runs at omega = 0")
    return accumulate_fisher_rays(field, medium, grid, draw_rays(dataset, cfg), config, cfg.lambda_for(grid.m), threads, dtype)


def covariance_diag(f: FisherDiag) -> np.ndarray:
    if np.any(f.entries <= 0):
        raise ContractError("Fisher entries must be positive")
    return 1.0 / f.entries


@dataclass
class UncertaintyField:
    m: int
    sigma_axes: np.ndarray  # (M^3, 3)
    sigma_norm: np.ndarray  # (M^3,)
    bounds: SceneBounds

    def __post_init__(self):
        if self.sigma_norm.shape != (self.m**3,):
            raise ContractError("sigma_norm must hold one value per vertex")
        if np.any(self.sigma_norm < 0):
            raise ContractError("uncertainty must be >= 0")


def build_uncertainty_field(variances, m: int, bounds: SceneBounds) -> UncertaintyField:
    variances = np.asarray(variances, dtype=np.float64)
    if np.any(variances < 0):
        raise ContractError("variances must be >= 0")
    sigma = np.sqrt(variances)
    return UncertaintyField(m, sigma, np.sqrt((sigma**2).sum(axis=-1)), bounds)


def uncertainty_at(u: UncertaintyField, x) -> np.ndarray:
    """Trilinear interpolation of ``sigma_norm`` (scalar for one point)."""
    x = np.asarray(x, dtype=np.float64)
    ids, w = cell_weights(u.bounds, u.m, x.reshape(-1, 3))
    corners = u.sigma_norm[ids]
    # keep rounding from pushing the blend outside the corner range
    out = np.clip((w * corners).sum(axis=-1), corners.min(axis=-1), corners.max(axis=-1))
    return out.reshape(x.shape[:-1])


@dataclass
class PixelUncertainty:
    value: np.ndarray
    empty: np.ndarray  # True where the ray carries no object weight


def pixel_uncertainty_from(out, t: np.ndarray, rays: RayBatch, u: UncertaintyField, mode: str = "mean", weight_floor: float = 0.0, eps: float = 1e-10) -> PixelUncertainty:
    w = out.weights_obj.mean(axis=-1).astype(np.float64)
    pos = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    ux = uncertainty_at(u, pos)
    total = w.sum(axis=-1)
    empty = total <= 0
    if mode == "mean":
        value = (w * ux).sum(axis=-1) / np.maximum(total, eps)
    elif mode == "max":
        value = np.where(w > weight_floor, ux, 0.0).max(axis=-1)
    else:
        raise ContractError(f"unknown aggregation {mode!r}")
    return PixelUncertainty(np.where(empty, 0.0, value), empty)


def render_uncertainty_rays(field, medium, u: UncertaintyField, rays: RayBatch, config: RenderConfig, mode: str = "mean", threads: int = 1) -> PixelUncertainty:
    out = render_rays(field, medium, rays, config, threads=threads)
    return pixel_uncertainty_from(out, out.t, rays, u, mode)


def render_pixel_uncertainty(field, medium, u: UncertaintyField, ray, config: RenderConfig, mode: str = "mean") -> tuple[float, bool]:
    res = render_uncertainty_rays(field, medium, u, RayBatch.from_rays([ray]), config, mode)
    return float(res.value[0]), bool(res.empty[0])


# --------------------------------------------------------------------------
# raw volume file
# --------------------------------------------------------------------------

VOLUME_MAGIC = b"UWNERFU1"
_VOLUME_HEADER = "<8sI6d"


def export_volume(u: UncertaintyField, path) -> None:
    """Magic, M, bounds (lo then hi), then M^3 little-endian float32, x fastest."""
    header = struct.pack(_VOLUME_HEADER, VOLUME_MAGIC, u.m, *u.bounds.lo, *u.bounds.hi)
    Path(path).write_bytes(header + u.sigma_norm.astype("<f4").tobytes())


def read_volume(path) -> tuple[int, SceneBounds, np.ndarray]:
    data = Path(path).read_bytes()
    size = struct.calcsize(_VOLUME_HEADER)
    magic, m, *b = struct.unpack(_VOLUME_HEADER, data[:size])
    if magic != VOLUME_MAGIC:
        raise ContractError(f"{path}: not an uncertainty volume")
    body = np.frombuffer(data, dtype="<f4", offset=size)
    if body.size != m**3:
        raise ContractError(f"{path}: expected {m**3} values, found {body.size}")
    return m, SceneBounds(tuple(b[:3]), tuple(b[3:])), body.copy()
