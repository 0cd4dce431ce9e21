"""Procedural ground-truth scenes and the two-coefficient underwater image model.

The water model applied to a clean image ``J`` with per-pixel range ``z`` is

    I_c = J_c * exp(-beta_D_c * z) + B_inf_c * (1 - exp(-beta_B_c * z))

with per-channel constants.  Pixels that miss every primitive have infinite
range and come out as exactly ``B_inf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, write_dataset
from . import diff
from .diff import ContractError
from .field import SceneBounds
from .render import Camera, look_at


@dataclass(frozen=True)
class Solid:
    color: tuple[float, float, float]

    def albedo(self, p: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), p.shape).copy()


@dataclass(frozen=True)
class Checker:
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    size: float = 0.25

    def albedo(self, p: np.ndarray) -> np.ndarray:
        parity = np.floor(p / self.size).astype(np.int64).sum(axis=-1) % 2
        return np.where(parity[..., None] == 0, np.asarray(self.color_a), np.asarray(self.color_b))


@dataclass(frozen=True)
class Gradient:
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    axis: int = 2
    lo: float = 0.0
    hi: float = 1.0

    def albedo(self, p: np.ndarray) -> np.ndarray:
        s = np.clip((p[..., self.axis] - self.lo) / (self.hi - self.lo), 0, 1)[..., None]
        return (1 - s) * np.asarray(self.color_a) + s * np.asarray(self.color_b)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: object

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        n = (p - np.asarray(self.center)) / self.radius
        return t, n

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) < self.radius

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Unsigned distance to the surface."""
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    texture: object

    def intersect(self, o: np.ndarray, d: np.ndarray):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nan_to_num(np.minimum(ta, tb), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
        t_enter = tmin.max(axis=-1)
        t_exit = tmax.min(axis=-1)
        hit = (t_enter <= t_exit) & (t_enter > 1e-9)
        t = np.where(hit, t_enter, np.inf)
        axis = tmin.argmax(axis=-1)
        n = np.zeros(o.shape)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
        np.put_along_axis(n, axis[..., None], sign[..., None], axis=-1)
        return t, n

    def contains(self, p: np.ndarray) -> np.ndarray:
        return np.all((p > np.asarray(self.lo)) & (p < np.asarray(self.hi)), axis=-1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        outside = np.linalg.norm(np.maximum(np.maximum(lo - p, p - hi), 0), axis=-1)
        inside = np.min(np.minimum(p - lo, hi - p), axis=-1)
        return np.where(self.contains(p), inside, outside)


@dataclass
class SyntheticScene:
    primitives: list
    bounds: SceneBounds
    light_dir: tuple[float, float, float] = (0.35, -0.45, 0.82)
    ambient: float = 0.35

    def __post_init__(self):
        lo, hi = np.array(self.bounds.lo), np.array(self.bounds.hi)
        for prim in self.primitives:
            if isinstance(prim, Sphere):
                c, r = np.asarray(prim.center), prim.radius
                ok = np.all(c - r >= lo) and np.all(c + r <= hi)
            else:
                ok = np.all(np.asarray(prim.lo) >= lo) and np.all(np.asarray(prim.hi) <= hi)
            if not ok:
                raise ContractError(f"primitive {prim} leaves the scene bounds")

    def inside_any(self, p: np.ndarray) -> np.ndarray:
        return np.any([prim.contains(p) for prim in self.primitives], axis=0)

    def surface_distance(self, p: np.ndarray) -> np.ndarray:
        return np.min([prim.distance(p) for prim in self.primitives], axis=0)


@dataclass(frozen=True)
class WaterParams:
    beta_D: tuple[float, float, float] = (0.8, 0.35, 0.2)
    beta_B: tuple[float, float, float] = (1.0, 0.6, 0.3)
    B_inf: tuple[float, float, float] = (0.05, 0.25, 0.35)

    def __post_init__(self):
        if np.any(np.asarray(self.beta_D) < 0) or np.any(np.asarray(self.beta_B) < 0):
            raise ContractError("water coefficients must be >= 0")
        if np.any(np.asarray(self.B_inf) < 0) or np.any(np.asarray(self.B_inf) > 1):
            raise ContractError("veiling light must lie in [0, 1]")


CLEAR_WATER = WaterParams((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))


@dataclass(frozen=True)
class CameraRig:
    """Cameras on a horizontal circle, all looking at ``target``."""

    n_views: int = 16
    radius: float = 4.0
    height: float = 1.4
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fov_deg: float = 40.0
    width: int = 64
    height_px: int = 64
    phase: float = 0.0

    def __post_init__(self):
        if self.n_views < 2:
            raise ContractError("a rig needs at least two views")

    def focal(self) -> float:
        return 0.5 * self.width / np.tan(np.radians(self.fov_deg) / 2)

    def camera_at(self, eye) -> Camera:
        f = self.focal()
        return Camera(f, f, self.width / 2, self.height_px / 2, self.width, self.height_px, look_at(eye, self.target))

    def cameras(self) -> list[Camera]:
        out = []
        for k in range(self.n_views):
            a = self.phase + 2 * np.pi * k / self.n_views
            eye = (self.radius * np.cos(a), self.radius * np.sin(a), self.height)
            out.append(self.camera_at(eye))
        return out


def default_scene() -> SyntheticScene:
    """Textured floor, a box and two spheres, with open space above them."""
    bounds = SceneBounds((-1.5, -1.5, -0.6), (1.5, 1.5, 2.4))
    return SyntheticScene(
        primitives=[
            Box((-1.4, -1.4, -0.6), (1.4, 1.4, -0.4), Checker((0.85, 0.78, 0.6), (0.45, 0.38, 0.3), 0.35)),
            Box((-0.95, -0.85, -0.4), (-0.05, 0.05, 0.5), Checker((0.9, 0.85, 0.2), (0.15, 0.55, 0.25), 0.3)),
            Sphere((0.5, 0.4, 0.15), 0.55, Gradient((0.95, 0.45, 0.15), (0.95, 0.95, 0.9), axis=2, lo=-0.4, hi=0.7)),
            Sphere((-0.35, 0.75, -0.1), 0.3, Solid((0.85, 0.2, 0.25))),
        ],
        bounds=bounds,
    )


def trace_scene(scene: SyntheticScene, origins: np.ndarray, dirs: np.ndarray):
    """First hit along each ray: (range, normal, primitive index or -1)."""
    best = np.full(origins.shape[0], np.inf)
    normal = np.zeros_like(origins)
    which = np.full(origins.shape[0], -1)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        which[closer] = i
    return best, normal, which


def render_clean_gt(scene: SyntheticScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Clean Lambert-shaded image J and Euclidean range map z (inf on misses)."""
    rays = camera.rays(0.0, 1.0)
    z, normal, which = trace_scene(scene, rays.origins, rays.dirs)
    image = np.zeros(rays.origins.shape)
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    for i, prim in enumerate(scene.primitives):
        m = which == i
        if not np.any(m):
            continue
        p = rays.origins[m] + z[m, None] * rays.dirs[m]
        shade = scene.ambient + (1 - scene.ambient) * np.maximum(0.0, normal[m] @ light)
        image[m] = prim.texture.albedo(p) * shade[:, None]
    h, w = camera.height, camera.width
    return image.reshape(h, w, 3), z.reshape(h, w)


def apply_water(J: np.ndarray, z: np.ndarray, water: WaterParams) -> np.ndarray:
    J = np.asarray(J, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if J.shape[:-1] != z.shape:
        raise ContractError("image and range map shapes differ")
    if np.any(z < 0):
        raise ContractError("range must be >= 0")
    zz = z[..., None]

    def optical_depth(beta):
        beta = np.asarray(beta, dtype=np.float64)
        # beta = 0 means no water along the path, even at infinite range
        with np.errstate(invalid="ignore"):
            return np.where(beta > 0, beta * zz, 0.0)

    direct = J * np.exp(-optical_depth(water.beta_D))
    backscatter = np.asarray(water.B_inf) * (1.0 - np.exp(-optical_depth(water.beta_B)))
    return direct + backscatter


def make_dataset(
    scene: SyntheticScene,
    water: WaterParams,
    rig: CameraRig,
    seed: int,
    out_dir,
    n_eval: int = 2,
    near: float = 0.5,
    far: float = 9.0,
) -> Dataset:
    """Render a posed underwater image set and write it to ``out_dir``.

    The seed sets the azimuth phase of the orbit.  The last ``n_eval`` views
    are tagged ``eval``.
    """
    rng = np.random.default_rng(seed)
    rig = CameraRig(**{**rig.__dict__, "phase": float(rng.uniform(0, 2 * np.pi / rig.n_views))})
    cameras = rig.cameras()
    clean, ranges, images = [], [], []
    for cam in cameras:
        J, z = render_clean_gt(scene, cam)
        clean.append(J.astype(np.float32))
        ranges.append(z.astype(np.float32))
        images.append(apply_water(J, z, water).astype(np.float32))
    splits = ["train"] * (rig.n_views - n_eval) + ["eval"] * n_eval
    ds = Dataset(
        images=np.stack(images),
        cameras=cameras,
        splits=splits,
        bounds=scene.bounds,
        near=near,
        far=far,
        clean=np.stack(clean),
        ranges=np.stack(ranges),
    )
    write_dataset(ds, Path(out_dir))
    return ds


class BlobField:
    """A trained field plus a Gaussian density blob, used to plant a floater.

    Density gains ``density * g`` and colour blends toward ``color`` by ``g``,
    with ``g = exp(-|x - center|^2 / (2 radius^2))``.
    """

    def __init__(self, base, center, radius: float, density: float = 50.0, color=(1.0, 1.0, 1.0)):
        self.base = base
        self.params = base.params
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.density = float(density)
        self.color = np.asarray(color, dtype=np.float64)

    def bump(self, tape, x):
        dx = x - self.center.astype(tape.dtype)
        q = (dx * dx).sum(axis=1)
        return diff.exp(q * (-0.5 / self.radius**2))

    def query(self, tape, x, d):
        sigma, rgb = self.base.query(tape, x, d)
        g = self.bump(tape, x)
        g3 = g.reshape(-1, 1)
        return sigma + g * self.density, rgb * (1.0 - g3) + g3 * self.color.astype(tape.dtype)
