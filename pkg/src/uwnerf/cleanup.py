"""Artifact removal by hiding object density where the uncertainty field is high."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff import ContractError
from .laplace import UncertaintyField, uncertainty_at
from .render import Camera, Ray, RayBatch, RenderConfig, RenderOutput, render_image, render_rays


@dataclass(frozen=True)
class CleanupConfig:
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ContractError("tau must lie in [0, 1]")


def normalize_field(u: UncertaintyField) -> UncertaintyField:
    """Scale ``sigma_norm`` (and the per-axis values) by the global maximum."""
    top = float(np.max(u.sigma_norm)) if u.sigma_norm.size else 0.0
    if not top > 0:
        raise ContractError("cannot normalize an all-zero uncertainty field")
    return UncertaintyField(u.m, u.sigma_axes / top, u.sigma_norm / top, u.bounds)


def density_mask(u_normalized: UncertaintyField, tau: float):
    """Per-sample factor: 1 where U(x) <= tau, else 0."""
    CleanupConfig(tau)

    def keep(positions: np.ndarray) -> np.ndarray:
        return (uncertainty_at(u_normalized, positions) <= tau).astype(np.float64)

    return keep


def thresholded_render_rays(field, medium, u_normalized: UncertaintyField, tau: float, rays: RayBatch, config: RenderConfig, mode: str = "full", threads: int = 1) -> RenderOutput:
    return render_rays(field, medium, rays, config, mode, threads=threads, density_keep=density_mask(u_normalized, tau))


def thresholded_render_pixel(field, medium, u_normalized: UncertaintyField, tau: float, ray: Ray, config: RenderConfig, pixel_id: int = 0) -> RenderOutput:
    rays = RayBatch.from_rays([ray])
    return render_rays(
        field, medium, rays, config, pixel_ids=np.array([pixel_id]), density_keep=density_mask(u_normalized, tau)
    ).take(0)


def thresholded_render_image(field, medium, u_normalized: UncertaintyField, tau: float, camera: Camera, config: RenderConfig, mode: str = "full", threads: int = 1) -> RenderOutput:
    return render_image(field, medium, camera, config, mode, threads, density_keep=density_mask(u_normalized, tau))


def top_fraction_tau(u_normalized: UncertaintyField, fraction: float = 0.1) -> float:
    """Largest tau that masks at least the top ``fraction`` of vertices.

    Vertices with value >= the (1 - fraction) quantile all exceed the
    returned tau.
    """
    q = float(np.quantile(u_normalized.sigma_norm, 1.0 - fraction, method="lower"))
    return float(np.nextafter(q, -np.inf))
