"""Image buffer files: 8-bit PNG for viewing, raw float32 where bits matter.

Raw layout: one ASCII header line ``"<width> <height> <channels>\\n"``
followed by little-endian float32 values in row-major (row, column,
channel) order.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image


def write_raw(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    header = f"{w} {h} {c}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_raw(path) -> np.ndarray:
    """Read a raw float image as (H, W, C) float32."""
    data = Path(path).read_bytes()
    end = data.index(b"\n")
    w, h, c = (int(v) for v in data[:end].split())
    body = np.frombuffer(data, dtype="<f4", offset=end + 1)
    if body.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {body.size}")
    return body.reshape(h, w, c).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.nan_to_num(np.asarray(image, dtype=np.float64), nan=0.0)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32) / 255.0


def write_heatmap(path, values: np.ndarray, vmax: float | None = None) -> None:
    """Viridis-coloured PNG of a scalar map (visualisation only)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[..., 0]
    top = float(vmax) if vmax is not None else float(np.max(values)) if values.size else 1.0
    norm = values / top if top > 0 else np.zeros_like(values)
    rgb = colormaps["viridis"](np.clip(norm, 0, 1))[..., :3]
    write_png(path, rgb)
