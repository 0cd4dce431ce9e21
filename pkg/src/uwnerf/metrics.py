"""Image quality and uncertainty calibration metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .diff import ContractError

PSNR_TABLE_CAP = 99.0
DEFAULT_FRACTIONS = np.round(np.arange(100) * 0.01, 2)


class ErrorKind(str, enum.Enum):
    MSE = "mse"
    MAE = "mae"
    RMSE = "rmse"


def _pair(img, ref) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ContractError(f"shape mismatch {img.shape} vs {ref.shape}")
    if not (np.all(np.isfinite(img)) and np.all(np.isfinite(ref))):
        raise ContractError("images must be finite")
    return img, ref


def pixel_errors(img, ref, kind: ErrorKind | str = ErrorKind.MSE) -> np.ndarray:
    """Per-pixel error, channel-averaged, flattened in row-major pixel order."""
    img, ref = _pair(img, ref)
    kind = ErrorKind(kind)
    diff = (img - ref).reshape(-1, img.shape[-1])
    if kind is ErrorKind.MAE:
        return np.abs(diff).mean(axis=-1)
    mse = (diff * diff).mean(axis=-1)
    return np.sqrt(mse) if kind is ErrorKind.RMSE else mse


def psnr(img, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    img, ref = _pair(img, ref)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def table_psnr(value: float) -> float:
    return min(value, PSNR_TABLE_CAP)


def ssim(img, ref, window: int = 8, peak: float = 1.0, c1: float | None = None, c2: float | None = None) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` tiles of the grey images.

    Grey is the channel mean; tiles that do not fit at the right and bottom
    edges are dropped.
    """
    img, ref = _pair(img, ref)
    if img.ndim == 3:
        img, ref = img.mean(axis=-1), ref.mean(axis=-1)
    h, w = img.shape
    if h < window or w < window:
        raise ContractError("image is smaller than the SSIM window")
    c1 = (0.01 * peak) ** 2 if c1 is None else c1
    c2 = (0.03 * peak) ** 2 if c2 is None else c2
    th, tw = h // window, w // window

    def tiles(a):
        return a[: th * window, : tw * window].reshape(th, window, tw, window).swapaxes(1, 2).reshape(th, tw, -1)

    x, y = tiles(img), tiles(ref)
    mx, my = x.mean(axis=-1), y.mean(axis=-1)
    vx, vy = x.var(axis=-1), y.var(axis=-1)
    cov = ((x - mx[..., None]) * (y - my[..., None])).mean(axis=-1)
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.fractions.shape != self.values.shape:
            raise ContractError("fractions and values must align")


def removal_order(ranking: np.ndarray) -> np.ndarray:
    """Indices from most to least uncertain, ties by ascending index."""
    ranking = np.asarray(ranking, dtype=np.float64)
    return np.lexsort((np.arange(ranking.size), -ranking))


def sparsification_curve(errors, ranking, fractions=DEFAULT_FRACTIONS) -> SparsificationCurve:
    """Mean remaining error after dropping the top ``ceil(f * n)`` ranked items.

    Values are divided by the mean over all items.  Removing everything
    leaves a remaining error of 0, as does an all-zero error vector.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    ranking = np.asarray(ranking, dtype=np.float64).ravel()
    fractions = np.asarray(fractions, dtype=np.float64)
    n = errors.size
    if n == 0:
        raise ContractError("need at least one element")
    if ranking.size != n:
        raise ContractError("errors and ranking must have equal length")
    if np.any(fractions < 0) or np.any(fractions >= 1):
        raise ContractError("fractions must lie in [0, 1)")
    order = removal_order(ranking)
    total = np.sort(errors).sum() / n
    values = np.empty(fractions.size)
    for i, f in enumerate(fractions):
        k = math.ceil(f * n - 1e-9)
        rest = errors[order[k:]]
        # sort before summing so equal sets give bit-equal means
        mean = np.sort(rest).sum() / rest.size if rest.size else 0.0
        values[i] = mean / total if total > 0 else 0.0
    return SparsificationCurve(fractions, values)


def ause(errors, uncertainties, fractions=DEFAULT_FRACTIONS) -> float:
    """Trapezoid area between the uncertainty-ranked and oracle curves."""
    curve = sparsification_curve(errors, uncertainties, fractions)
    oracle = sparsification_curve(errors, errors, fractions)
    return float(np.trapezoid(curve.values - oracle.values, curve.fractions))
