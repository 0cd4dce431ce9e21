"""Grid displacement field over the scene box and the perturbed render path.

The grid has ``M`` vertices per axis spanning the scene box, vertex
``(i, j, k)`` sitting at normalized coordinate ``(i, j, k) / (M - 1)``.
Flat vertex ids run x-fastest: ``i + M * (j + M * k)``.  Displacements are
stored in normalized-cube units; a sample at ``x`` is queried at
``x + D(x) * extent``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diff
from .diff import ContractError, Tape, Var
from .field import SceneBounds
from .render import Ray, RayBatch, RenderConfig, RenderOutput, _to_output, render_rays, samples_for, trace_rays

# corner order: dx fastest, then dy, then dz
_CORNERS = np.array([(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])


def normalize_coord(bounds: SceneBounds, x) -> np.ndarray:
    """Affine map of the box onto [0, 1]^3, clamped componentwise."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip((x - bounds.lo_array) / bounds.extent, 0.0, 1.0)


def cell_weights(bounds: SceneBounds, m: int, x) -> tuple[np.ndarray, np.ndarray]:
    """Vertex ids (P, 8) and trilinear weights (P, 8) for query points (P, 3).

    Points outside the box are clamped into the boundary cell.  On an
    interior cell face the lower cell is used unless it would leave the grid.
    """
    if m < 2:
        raise ContractError("grid needs at least 2 vertices per axis")
    s = normalize_coord(bounds, np.atleast_2d(x)) * (m - 1)
    i0 = np.clip(np.floor(s).astype(np.int64), 0, m - 2)
    f = s - i0
    corner = i0[:, None, :] + _CORNERS[None]
    ids = corner[..., 0] + m * (corner[..., 1] + m * corner[..., 2])
    per_axis = np.where(_CORNERS[None] == 1, f[:, None, :], 1.0 - f[:, None, :])
    return ids, per_axis.prod(axis=-1)


def vertex_ijk(m: int, ids) -> np.ndarray:
    ids = np.asarray(ids)
    return np.stack([ids % m, (ids // m) % m, ids // (m * m)], axis=-1)


def vertex_positions(bounds: SceneBounds, m: int) -> np.ndarray:
    """World positions of all vertices in flat-id order, (M^3, 3)."""
    ijk = vertex_ijk(m, np.arange(m**3))
    return bounds.lo_array + ijk / (m - 1) * bounds.extent


@dataclass
class PerturbGrid:
    m: int
    omega: np.ndarray  # (M^3, 3)
    bounds: SceneBounds

    def __post_init__(self):
        if self.m < 2:
            raise ContractError("grid needs at least 2 vertices per axis")
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if self.omega.shape != (self.m**3, 3):
            raise ContractError(f"omega must have shape ({self.m**3}, 3)")
        if not np.all(np.isfinite(self.omega)):
            raise ContractError("omega entries must be finite")

    @classmethod
    def zeros(cls, m: int, bounds: SceneBounds) -> "PerturbGrid":
        return cls(m, np.zeros((m**3, 3)), bounds)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.omega)

    def displacer(self):
        """Hook for ``trace_rays``: moves sample positions by the grid."""
        extent = self.bounds.extent

        def displace(pos: Var, pos_np: np.ndarray) -> Var:
            ids, w = cell_weights(self.bounds, self.m, pos_np)
            tape = pos.tape
            d = diff.trilinear(tape.const(self.omega), ids, w.astype(tape.dtype))
            return pos + d * extent.astype(tape.dtype)

        return displace


def displacement(grid: PerturbGrid, x) -> np.ndarray:
    """Trilinear blend of the 8 vertex vectors around ``x`` (normalized units)."""
    x = np.asarray(x, dtype=np.float64)
    ids, w = cell_weights(grid.bounds, grid.m, x.reshape(-1, 3))
    out = np.einsum("pk,pkc->pc", w, grid.omega[ids])
    return out.reshape(x.shape)


def perturbed_render_rays(field, medium, grid: PerturbGrid, rays: RayBatch, config: RenderConfig, mode="full", pixel_ids=None, threads=1, dtype=None) -> RenderOutput:
    """Render with every object query displaced by the grid; medium unchanged."""
    return render_rays(field, medium, rays, config, mode, pixel_ids, threads, dtype, displace=grid.displacer())


def perturbed_render_pixel(field, medium, grid: PerturbGrid, ray: Ray, config: RenderConfig, pixel_id: int = 0) -> RenderOutput:
    rays = RayBatch.from_rays([ray])
    return perturbed_render_rays(field, medium, grid, rays, config, pixel_ids=np.array([pixel_id])).take(0)


class VertexJacobianRow(NamedTuple):
    vertex: tuple[int, int, int]
    axis: int
    d_color: np.ndarray  # (3,) derivative of each colour channel


@dataclass
class RayJacobians:
    """Sparse colour Jacobians for a batch of rays at omega = 0.

    Row ``u`` belongs to ray ``ray[u]`` and vertex ``vertex[u]``;
    ``values[u, axis, channel]`` is d colour[channel] / d omega[vertex, axis].
    Rows are sorted by (ray, vertex).
    """

    ray: np.ndarray
    vertex: np.ndarray
    values: np.ndarray
    output: RenderOutput


def ray_jacobians(field, medium, grid: PerturbGrid, rays: RayBatch, config: RenderConfig, pixel_ids=None, dtype=None) -> RayJacobians:
    """Exact reverse-mode colour Jacobians with respect to the grid at its mode."""
    if not grid.is_zero:
        raise ContractError("Jacobians are only defined at omega = 0")
    dtype = dtype or field.params.dtype.type
    b = len(rays)
    samples = samples_for(rays, config, pixel_ids if pixel_ids is not None else np.arange(b))
    tape = Tape(dtype)
    tr = trace_rays(tape, field, medium, rays, samples, "full", config.bounds, positions_leaf=True)
    color = tr.outputs["color"]
    n = samples.t.shape[1]
    # d colour_c / d position for every sample, (B*N, 3 axes, 3 channels)
    g = np.empty((b * n, 3, 3), dtype=np.float64)
    for c in range(3):
        seed = np.zeros(color.shape, dtype=dtype)
        seed[:, c] = 1
        (g[:, :, c],) = tape.backward(color, seed, [tr.positions])
    g *= grid.bounds.extent[None, :, None]
    ids, w = cell_weights(grid.bounds, grid.m, tr.positions.value.astype(np.float64))
    nv = grid.m**3
    ray_of = np.repeat(np.arange(b, dtype=np.int64), n * 8)
    keys = ray_of * nv + ids.reshape(-1)
    ukeys, inverse = np.unique(keys, return_inverse=True)
    contrib = (w.reshape(-1, 1, 1) * np.repeat(g, 8, axis=0)).reshape(-1, 9)
    vals = np.stack([np.bincount(inverse, contrib[:, k], minlength=len(ukeys)) for k in range(9)], axis=-1)
    return RayJacobians(ukeys // nv, ukeys % nv, vals.reshape(-1, 3, 3), _to_output(tr.outputs, samples.t))


def jacobian_color_wrt_omega(field, medium, grid: PerturbGrid, ray: Ray, config: RenderConfig, pixel_id: int = 0):
    """Render at the mode plus one row per touched vertex and axis."""
    jac = ray_jacobians(field, medium, grid, RayBatch.from_rays([ray]), config, np.array([pixel_id]))
    ijk = vertex_ijk(grid.m, jac.vertex)
    rows = [
        VertexJacobianRow(tuple(int(v) for v in ijk[u]), axis, jac.values[u, axis].copy())
        for u in range(len(jac.vertex))
        for axis in range(3)
    ]
    return jac.output.take(0), rows
