"""Posed image sets on disk.

Directory layout::

    cameras.txt        one line per view: id, K (9 values, row-major),
                       world-from-camera pose (12 values, row-major 3x4), split
    bounds.txt         scene box (6 values) and ray near/far (2 values)
    uw_####.png|.raw   underwater images
    clean_####.png|.raw
    range_####.raw     Euclidean range, +inf where the ray misses

Floats are written with ``repr`` so text round-trips are exact; lines
starting with ``#`` are comments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diff import ContractError
from .field import SceneBounds
from .images import read_raw, write_png, write_raw
from .render import Camera


@dataclass
class Dataset:
    images: np.ndarray  # (V, H, W, 3) float32
    cameras: list[Camera]
    splits: list[str]
    bounds: SceneBounds
    near: float = 0.5
    far: float = 9.0
    clean: np.ndarray | None = None
    ranges: np.ndarray | None = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or len(self.splits) != len(self.images):
            raise ContractError("images, cameras and splits must align")
        if "train" not in self.splits:
            raise ContractError("dataset needs at least one train image")
        sizes = {(c.width, c.height) for c in self.cameras}
        if len(sizes) != 1:
            raise ContractError("all cameras must share one resolution")
        if not np.all((self.images >= 0) & (self.images <= 1)):
            raise ContractError("pixel values must lie in [0, 1]")

    def views(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.cameras[0].width, self.cameras[0].height


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_dataset(ds: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    w, h = ds.resolution
    lines = [
        "# view_id K[9] pose[12] split",
        f"# resolution {w} {h}",
    ]
    for i, (cam, split) in enumerate(zip(ds.cameras, ds.splits)):
        lines.append(f"{i} {_fmt(cam.K.ravel())} {_fmt(cam.pose.ravel())} {split}")
    (out_dir / "cameras.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "bounds.txt").write_text(
        "# lo_x lo_y lo_z hi_x hi_y hi_z\n"
        f"{_fmt(ds.bounds.lo + ds.bounds.hi)}\n"
        "# near far\n"
        f"{_fmt([ds.near, ds.far])}\n"
    )
    for i in range(len(ds.images)):
        write_raw(out_dir / f"uw_{i:04d}.raw", ds.images[i])
        write_png(out_dir / f"uw_{i:04d}.png", ds.images[i])
        if ds.clean is not None:
            write_raw(out_dir / f"clean_{i:04d}.raw", ds.clean[i])
            write_png(out_dir / f"clean_{i:04d}.png", ds.clean[i])
        if ds.ranges is not None:
            write_raw(out_dir / f"range_{i:04d}.raw", ds.ranges[i])


def _data_lines(path: Path) -> list[list[str]]:
    return [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]


def read_cameras(path) -> tuple[list[Camera], list[str], tuple[int, int]]:
    path = Path(path)
    res = None
    for ln in path.read_text().splitlines():
        if ln.startswith("# resolution"):
            res = tuple(int(v) for v in ln.split()[2:4])
    if res is None:
        raise ContractError(f"{path}: missing resolution comment")
    cams, splits = [], []
    for tok in _data_lines(path):
        if len(tok) != 23:
            raise ContractError(f"{path}: expected 23 fields per camera line, got {len(tok)}")
        K = np.array([float(v) for v in tok[1:10]]).reshape(3, 3)
        pose = np.array([float(v) for v in tok[10:22]]).reshape(3, 4)
        cams.append(Camera(K[0, 0], K[1, 1], K[0, 2], K[1, 2], res[0], res[1], pose))
        splits.append(tok[22])
    return cams, splits, res


def read_bounds(path) -> tuple[SceneBounds, float, float]:
    rows = _data_lines(Path(path))
    vals = [float(v) for v in rows[0]]
    near, far = (float(v) for v in rows[1])
    return SceneBounds(tuple(vals[:3]), tuple(vals[3:6])), near, far


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    cams, splits, _ = read_cameras(directory / "cameras.txt")
    bounds, near, far = read_bounds(directory / "bounds.txt")
    images = np.stack([read_raw(directory / f"uw_{i:04d}.raw") for i in range(len(cams))])
    clean = ranges = None
    if (directory / "clean_0000.raw").exists():
        clean = np.stack([read_raw(directory / f"clean_{i:04d}.raw") for i in range(len(cams))])
    if (directory / "range_0000.raw").exists():
        ranges = np.stack([read_raw(directory / f"range_{i:04d}.raw")[..., 0] for i in range(len(cams))])
    return Dataset(images, cams, splits, bounds, near, far, clean, ranges)
