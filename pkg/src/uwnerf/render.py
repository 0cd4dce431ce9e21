"""Quadrature volume rendering with an object/medium split.

Per channel and sample i the object and medium contributions are

    obj_i = T_i * exp(-sigma_attn * t_i) * (1 - exp(-sigma_i * delta_i)) * c_i
    med_i = T_i * exp(-sigma_bs * t_i) * (1 - exp(-sigma_bs * delta_i)) * c_med

with ``T_i = exp(-sum_{j<i} sigma_j * delta_j)`` built from object density
only.  The final spacing is ``delta_N = t_far - t_N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Protocol

import numpy as np

from . import diff
from ._parallel import chunks, ordered_map
from .diff import ContractError, Tape, Var
from .field import FixedMedium, MediumVars, SceneBounds, medium_on_tape

MODES = ("full", "object-only", "object-attenuated", "medium-only", "vanilla")


class Field(Protocol):
    def query(self, tape: Tape, x: Var, d: Var) -> tuple[Var, Var]: ...


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 <= self.t_near < self.t_far:
            raise ContractError("need 0 <= t_near < t_far")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ContractError("ray direction must be unit length")


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    dirs: np.ndarray  # (B, 3)
    near: np.ndarray  # (B,)
    far: np.ndarray  # (B,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, sl) -> "RayBatch":
        return RayBatch(self.origins[sl], self.dirs[sl], self.near[sl], self.far[sl])

    @classmethod
    def from_rays(cls, rays: list[Ray]) -> "RayBatch":
        return cls(
            np.array([r.origin for r in rays], dtype=np.float64),
            np.array([r.direction for r in rays], dtype=np.float64),
            np.array([r.t_near for r in rays], dtype=np.float64),
            np.array([r.t_far for r in rays], dtype=np.float64),
        )


@dataclass
class SampleSet:
    t: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if self.t.shape != self.delta.shape or self.t.shape[-1] < 1:
            raise ContractError("sample arrays must match and be non-empty")


@dataclass
class RenderOutput:
    color: np.ndarray
    color_obj: np.ndarray
    color_med: np.ndarray
    weights_obj: np.ndarray  # (..., N, 3)
    transmittance_obj: np.ndarray  # (..., N)
    depth_expected: np.ndarray
    t: np.ndarray | None = None

    def take(self, i) -> "RenderOutput":
        return RenderOutput(*(None if v is None else v[i] for v in self._fields()))

    def _fields(self):
        return (
            self.color,
            self.color_obj,
            self.color_med,
            self.weights_obj,
            self.transmittance_obj,
            self.depth_expected,
            self.t,
        )

    def reshape(self, *lead) -> "RenderOutput":
        def r(v):
            return None if v is None else v.reshape(tuple(lead) + v.shape[1:])

        return RenderOutput(*(r(v) for v in self._fields()))

    @staticmethod
    def concat(parts: list["RenderOutput"]) -> "RenderOutput":
        cols = zip(*(p._fields() for p in parts))
        return RenderOutput(*(None if c[0] is None else np.concatenate(c) for c in cols))


@dataclass(frozen=True)
class RenderConfig:
    """Sampling and evaluation options shared by every render path.

    ``bounds`` restricts object density to the scene box: samples outside it
    never reach the field and carry zero density.
    """

    n_samples: int = 64
    jitter: bool = False
    t_near: float = 0.5
    t_far: float = 9.0
    bounds: SceneBounds | None = None
    chunk_rays: int = 1024
    seed: int = 0


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_batch(near, far, n: int, offsets: np.ndarray | None = None) -> SampleSet:
    """Stratified nodes for a batch of rays.

    ``offsets`` (B, n) in [0, 1) places each node inside its bin; ``None``
    puts nodes at bin midpoints.
    """
    if n < 1:
        raise ContractError("need at least one sample")
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    width = (far - near) / n
    lower = near + width * np.arange(n)
    u = 0.5 if offsets is None else offsets
    t = lower + u * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far[:, 0] - t[:, -1]
    return SampleSet(t, delta)


def stratified_samples(ray: Ray, n: int, jitter: bool = False, rng: np.random.Generator | None = None) -> SampleSet:
    offsets = None
    if jitter:
        rng = rng if rng is not None else np.random.default_rng()
        offsets = rng.random((1, n))
    s = sample_batch([ray.t_near], [ray.t_far], n, offsets)
    return SampleSet(s.t[0], s.delta[0])


def pixel_offsets(pixel_ids: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Per-pixel jitter streams keyed on (seed, pixel index)."""
    return np.stack([np.random.default_rng([seed, int(p)]).random(n) for p in pixel_ids])


# --------------------------------------------------------------------------
# compositing on the tape
# --------------------------------------------------------------------------


def composite_vars(sigma: Var, rgb: Var, t: np.ndarray, delta: np.ndarray, medium: MediumVars, mode: str = "full") -> dict[str, Var]:
    """Composite (B, N) densities and (B, N, 3) colours along each ray."""
    tape = sigma.tape
    b, n = t.shape
    sd = sigma * delta
    trans = diff.exp(-diff.cumsum_exclusive(sd, axis=1))
    alpha = diff.one_minus_exp_neg(sd)
    w = (trans * alpha).reshape(b, n, 1)
    zeros3 = tape.const(np.zeros((b, 3)))
    if mode == "vanilla":
        c = (w * rgb).sum(axis=1)
        return dict(color=c, color_obj=c, color_med=zeros3, weights_obj=w * np.ones(3), transmittance_obj=trans)
    tt = t[..., None]
    if mode == "object-only":
        w_obj = w * np.ones(3)
    else:
        w_obj = w * diff.exp(-(medium.sigma_attn * tt))
    c_obj = (w_obj * rgb).sum(axis=1)
    if mode in ("object-only", "object-attenuated"):
        return dict(color=c_obj, color_obj=c_obj, color_med=zeros3, weights_obj=w_obj, transmittance_obj=trans)
    w_med = (
        trans.reshape(b, n, 1)
        * diff.exp(-(medium.sigma_bs * tt))
        * diff.one_minus_exp_neg(medium.sigma_bs * delta[..., None])
    )
    c_med = (w_med * medium.c_med).sum(axis=1)
    return dict(color=c_obj + c_med, color_obj=c_obj, color_med=c_med, weights_obj=w_obj, transmittance_obj=trans)


def _to_output(vars_: dict[str, Var], t: np.ndarray) -> RenderOutput:
    w = vars_["weights_obj"].value
    wm = w.mean(axis=-1)
    total = wm.sum(axis=-1)
    depth = np.where(total > 0, (wm * t).sum(axis=-1) / np.maximum(total, 1e-30), 0.0)
    return RenderOutput(
        vars_["color"].value,
        vars_["color_obj"].value,
        vars_["color_med"].value,
        w,
        vars_["transmittance_obj"].value,
        depth,
        t,
    )


def _check_medium(medium):
    if isinstance(medium, FixedMedium):
        return
    for name in ("sigma_bs", "sigma_attn"):
        value = getattr(medium, name, None)
        if value is not None and not isinstance(value, Var) and np.any(np.asarray(value) < 0):
            raise ContractError("medium coefficients must be >= 0")


def composite_vanilla(sigma, color, samples: SampleSet) -> np.ndarray:
    """Classic single-medium quadrature, colour only."""
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    if sigma.shape != samples.t.shape or color.shape != sigma.shape + (3,):
        raise ContractError("array lengths do not match the samples")
    if np.any(sigma < 0):
        raise ContractError("density must be >= 0")
    tape = Tape(np.float64, record=False)
    med = medium_on_tape(tape, FixedMedium(np.zeros(3), np.zeros(3), np.zeros(3)))
    out = composite_vars(tape.const(sigma[None]), tape.const(color[None]), samples.t[None], samples.delta[None], med, "vanilla")
    return out["color"].value[0]


def composite_seathru(sigma_obj, c_obj, medium, samples: SampleSet, mode: str = "full") -> RenderOutput:
    """Two-coefficient object/medium compositing for one ray."""
    sigma_obj = np.asarray(sigma_obj, dtype=np.float64)
    c_obj = np.asarray(c_obj, dtype=np.float64)
    if sigma_obj.shape != samples.t.shape or c_obj.shape != sigma_obj.shape + (3,):
        raise ContractError("array lengths do not match the samples")
    if np.any(sigma_obj < 0):
        raise ContractError("density must be >= 0")
    _check_medium(medium)
    tape = Tape(np.float64, record=False)
    med = medium_on_tape(tape, medium)
    out = composite_vars(tape.const(sigma_obj[None]), tape.const(c_obj[None]), samples.t[None], samples.delta[None], med, mode)
    return _to_output(out, samples.t[None]).take(0)


# --------------------------------------------------------------------------
# tracing rays through a field
# --------------------------------------------------------------------------


@dataclass
class Trace:
    outputs: dict[str, Var]
    positions: Var  # (B*N, 3) sample positions before any displacement
    samples: SampleSet
    inside: np.ndarray  # (B*N,) bool, samples that reached the field


def trace_rays(
    tape: Tape,
    field,
    medium,
    rays: RayBatch,
    samples: SampleSet,
    mode: str = "full",
    bounds: SceneBounds | None = None,
    displace: Callable[[Var, np.ndarray], Var] | None = None,
    positions_leaf: bool = False,
    density_keep: Callable[[np.ndarray], np.ndarray] | None = None,
) -> Trace:
    """Build the render graph for a batch of rays on ``tape``.

    ``displace(pos_var, pos_array)`` may move sample positions before the
    field is queried.  ``density_keep(positions)`` returns a per-sample factor
    that multiplies object density.
    """
    if mode not in MODES:
        raise ContractError(f"unknown render mode {mode!r}")
    b, n = samples.t.shape
    dtype = tape.dtype
    pos_np = (rays.origins[:, None, :] + samples.t[..., None] * rays.dirs[:, None, :]).reshape(-1, 3).astype(dtype)
    pos = tape.leaf(pos_np) if positions_leaf else tape.const(pos_np)
    inside = bounds.contains(pos_np) if bounds is not None else np.ones(b * n, dtype=bool)
    med = medium_on_tape(tape, medium)
    if mode == "medium-only":
        sigma = tape.const(np.zeros((b, n)))
        rgb = tape.const(np.zeros((b, n, 3)))
    else:
        qpos = pos if displace is None else displace(pos, pos_np)
        dirs = np.repeat(rays.dirs.astype(dtype), n, axis=0)
        if inside.all():
            sigma, rgb = field.query(tape, qpos, tape.const(dirs))
        else:
            idx = np.flatnonzero(inside)
            s_in, c_in = field.query(tape, diff.gather_rows(qpos, idx, unique=True), tape.const(dirs[idx]))
            sigma = diff.scatter_rows(s_in, idx, b * n)
            rgb = diff.scatter_rows(c_in, idx, b * n)
        sigma = sigma.reshape(b, n)
        rgb = rgb.reshape(b, n, 3)
        if density_keep is not None:
            sigma = sigma * np.asarray(density_keep(pos_np), dtype=dtype).reshape(b, n)
    outs = composite_vars(sigma, rgb, samples.t.astype(dtype), samples.delta.astype(dtype), med, mode)
    return Trace(outs, pos, samples, inside)


def samples_for(rays: RayBatch, config: RenderConfig, pixel_ids: np.ndarray | None = None, rng=None) -> SampleSet:
    offsets = None
    if config.jitter:
        if pixel_ids is not None:
            offsets = pixel_offsets(pixel_ids, config.n_samples, config.seed)
        else:
            rng = rng if rng is not None else np.random.default_rng(config.seed)
            offsets = rng.random((len(rays), config.n_samples))
    return sample_batch(rays.near, rays.far, config.n_samples, offsets)


def render_rays(
    field,
    medium,
    rays: RayBatch,
    config: RenderConfig,
    mode: str = "full",
    pixel_ids: np.ndarray | None = None,
    threads: int = 1,
    dtype=None,
    **trace_kwargs,
) -> RenderOutput:
    """Render a batch in fixed-size chunks; results do not depend on ``threads``."""
    dtype = dtype or _field_dtype(field)
    pixel_ids = np.arange(len(rays)) if pixel_ids is None else pixel_ids

    def run(sl):
        sub = rays[sl]
        samples = samples_for(sub, config, pixel_ids[sl])
        tape = Tape(dtype, record=False)
        tr = trace_rays(tape, field, medium, sub, samples, mode, config.bounds, **trace_kwargs)
        return _to_output(tr.outputs, samples.t)

    parts = ordered_map(run, chunks(len(rays), config.chunk_rays), threads)
    return RenderOutput.concat(parts)


def _field_dtype(field):
    params = getattr(field, "params", None)
    return params.dtype.type if params is not None else np.float64


def render_pixel(field, medium, ray: Ray, config: RenderConfig, mode: str = "full", pixel_id: int = 0) -> RenderOutput:
    rays = RayBatch.from_rays([ray])
    return render_rays(field, medium, rays, config, mode, pixel_ids=np.array([pixel_id])).take(0)


# --------------------------------------------------------------------------
# cameras and whole images
# --------------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera; ``pose`` is the 3x4 world-from-camera matrix.

    Camera axes follow the x-right, y-down, z-forward convention.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = dc_field(default_factory=lambda: np.eye(3, 4))

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        if self.width < 1 or self.height < 1 or self.fx <= 0 or self.fy <= 0:
            raise ContractError("invalid pinhole camera")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3].copy()

    def rays(self, near: float, far: float, pixels: np.ndarray | None = None) -> RayBatch:
        """Rays through pixel centres in row-major order (or the given flat indices)."""
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        v, u = np.divmod(np.asarray(pixels), self.width)
        d_cam = np.stack(
            [(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        )
        d = d_cam @ self.pose[:, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.pose[:, 3], d.shape).copy()
        count = d.shape[0]
        return RayBatch(o, d, np.full(count, float(near)), np.full(count, float(far)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.column_stack([right, down, fwd, eye])


def render_image(field, medium, camera: Camera, config: RenderConfig, mode: str = "full", threads: int = 1, **trace_kwargs) -> RenderOutput:
    """Render every pixel; the returned arrays have leading shape (H, W)."""
    rays = camera.rays(config.t_near, config.t_far)
    out = render_rays(field, medium, rays, config, mode, threads=threads, **trace_kwargs)
    return out.reshape(camera.height, camera.width)
