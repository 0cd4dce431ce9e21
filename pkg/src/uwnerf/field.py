"""Object radiance field (positional-encoded MLP) and global medium constants."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diff
from .diff import ContractError, NumericError, Tape, Var


@dataclass(frozen=True)
class SceneBounds:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise ContractError(f"degenerate scene bounds {self.lo} .. {self.hi}")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def lo_array(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.hi) + np.array(self.lo))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


@dataclass(frozen=True)
class PosEncConfig:
    frequencies_position: int = 6
    frequencies_direction: int = 2
    include_raw: bool = True

    def __post_init__(self):
        if self.frequencies_position < 0 or self.frequencies_direction < 0:
            raise ContractError("frequency counts must be >= 0")


def posenc(v, n_freqs: int, include_raw: bool = True) -> np.ndarray:
    """Fourier features of 3-vectors, laid out as [raw, sin_0, cos_0, sin_1, cos_1, ...].

    Each block holds the three components of ``sin(2^k * pi * v)`` (or cos).
    Works on a single (3,) vector or a batch (P, 3).
    """
    tape = Tape(np.asarray(v).dtype if np.asarray(v).dtype.kind == "f" else np.float64, record=False)
    return posenc_var(tape.const(v), n_freqs, include_raw).value


def posenc_var(v: Var, n_freqs: int, include_raw: bool = True) -> Var:
    parts = [v] if include_raw else []
    for k in range(n_freqs):
        scaled = v * float(2.0**k * np.pi)
        parts += [diff.sin(scaled), diff.cos(scaled)]
    if not parts:
        return v * 0.0
    return diff.concat(parts, axis=-1) if len(parts) > 1 else parts[0]


def encoding_width(n_freqs: int, include_raw: bool) -> int:
    return 3 * int(include_raw) + 6 * n_freqs


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor of the object MLP.

    The density trunk has ``depth`` layers of ``width`` units; the encoded
    position is concatenated back in before layer ``skip_at`` (0 disables the
    skip).  Positions are mapped through ``(x - center) * scale`` before
    encoding.
    """

    width: int = 64
    depth: int = 4
    skip_at: int = 2
    color_width: int = 32
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    activation: str = "relu"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        pe = self.posenc
        ex = encoding_width(pe.frequencies_position, pe.include_raw)
        ed = encoding_width(pe.frequencies_direction, pe.include_raw)
        shapes = []
        fan_in = ex
        for layer in range(self.depth):
            if layer == self.skip_at and layer > 0:
                fan_in += ex
            shapes += [(f"trunk{layer}.w", (fan_in, self.width)), (f"trunk{layer}.b", (self.width,))]
            fan_in = self.width
        shapes += [("density.w", (fan_in, 1)), ("density.b", (1,))]
        shapes += [("color0.w", (fan_in + ed, self.color_width)), ("color0.b", (self.color_width,))]
        shapes += [("rgb.w", (self.color_width, 3)), ("rgb.b", (3,))]
        return shapes


_ACTIVATION_CODES = {"relu": 0, "softplus": 1}


@dataclass
class FieldParams:
    arch: Architecture
    blocks: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.arch.layer_shapes()
        if [k for k, _ in expected] != list(self.blocks):
            raise ContractError("parameter blocks do not match the architecture")
        for name, shape in expected:
            if self.blocks[name].shape != shape:
                raise ContractError(f"{name}: shape {self.blocks[name].shape} != {shape}")

    @property
    def dtype(self):
        return next(iter(self.blocks.values())).dtype

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.arch, {k: v.astype(dtype) for k, v in self.blocks.items()})

    def check_finite(self):
        for name, value in self.blocks.items():
            if not np.all(np.isfinite(value)):
                raise NumericError(f"non-finite entries in {name}")

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.blocks.values()])


def init_field_params(arch: Architecture, seed: int = 0, dtype=np.float32) -> FieldParams:
    """Uniform fan-in initialisation, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape in arch.layer_shapes():
        if name.endswith(".w"):
            bound = np.sqrt(6.0 / shape[0]) if name.startswith("trunk") else np.sqrt(3.0 / shape[0])
            blocks[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            blocks[name] = np.zeros(shape, dtype=dtype)
    return FieldParams(arch, blocks)


def zero_field_params(arch: Architecture, dtype=np.float64) -> FieldParams:
    return FieldParams(arch, {k: np.zeros(s, dtype=dtype) for k, s in arch.layer_shapes()})


def mlp_forward(arch: Architecture, weights: dict[str, Var], x: Var, d: Var) -> tuple[Var, Var]:
    """Density (P,) and colour (P, 3) for positions ``x`` and unit directions ``d``."""
    act = diff.ACTIVATIONS[arch.activation]
    pe = arch.posenc
    xin = (x - np.asarray(arch.center)) * float(arch.scale)
    ex = posenc_var(xin, pe.frequencies_position, pe.include_raw)
    h = ex
    for layer in range(arch.depth):
        if layer == arch.skip_at and layer > 0:
            h = diff.concat([h, ex])
        h = act(diff.affine(h, weights[f"trunk{layer}.w"], weights[f"trunk{layer}.b"]))
    raw_sigma = diff.affine(h, weights["density.w"], weights["density.b"])
    sigma = diff.softplus(raw_sigma).reshape(-1)
    ed = posenc_var(d, pe.frequencies_direction, pe.include_raw)
    hc = act(diff.affine(diff.concat([h, ed]), weights["color0.w"], weights["color0.b"]))
    rgb = diff.sigmoid(diff.affine(hc, weights["rgb.w"], weights["rgb.b"]))
    return sigma, rgb


class NeuralField:
    """Renderer-facing wrapper: ``query(tape, x, d) -> (sigma, rgb)``."""

    def __init__(self, params: FieldParams, weights: dict[str, Var] | None = None):
        self.params = params
        self._weights = weights

    def bind(self, tape: Tape, trainable: bool = True) -> "NeuralField":
        make = tape.leaf if trainable else tape.const
        return NeuralField(self.params, {k: make(v) for k, v in self.params.blocks.items()})

    @property
    def weights(self) -> dict[str, Var] | None:
        return self._weights

    def query(self, tape: Tape, x: Var, d: Var) -> tuple[Var, Var]:
        weights = self._weights
        if weights is None or next(iter(weights.values())).tape is not tape:
            weights = {k: tape.const(v) for k, v in self.params.blocks.items()}
        return mlp_forward(self.params.arch, weights, x, d)


def _as_batch(x, d, dtype):
    x = np.asarray(x, dtype=dtype)
    d = np.asarray(d, dtype=dtype)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    d = np.broadcast_to(np.atleast_2d(d), x.shape)
    norms = np.linalg.norm(d.astype(np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("view directions must be unit length")
    if not np.all(np.isfinite(x)):
        raise ContractError("positions must be finite")
    return x, np.ascontiguousarray(d), single


def query_object(params: FieldParams, x, d) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the object field at one point (3,) or a batch (P, 3)."""
    params.check_finite()
    x, d, single = _as_batch(x, d, params.dtype)
    tape = Tape(params.dtype, record=False)
    sigma, rgb = NeuralField(params).query(tape, tape.const(x), tape.const(d))
    if single:
        return sigma.value[0], rgb.value[0]
    return sigma.value, rgb.value


class FieldSample(NamedTuple):
    sigma: np.ndarray
    rgb: np.ndarray
    d_sigma_dx: np.ndarray  # (..., 3)
    d_rgb_dx: np.ndarray  # (..., 3 channels, 3 axes)


def query_object_with_input_grad(params: FieldParams, x, d) -> FieldSample:
    """Field values plus their gradients with respect to position."""
    params.check_finite()
    x, d, single = _as_batch(x, d, params.dtype)
    tape = Tape(params.dtype)
    xv = tape.leaf(x)
    sigma, rgb = NeuralField(params).query(tape, xv, tape.const(d))
    (d_sigma,) = tape.backward(sigma, np.ones_like(sigma.value), [xv])
    d_rgb = np.empty(x.shape[:1] + (3, 3), dtype=params.dtype)
    for c in range(3):
        seed = np.zeros_like(rgb.value)
        seed[:, c] = 1
        (d_rgb[:, c, :],) = tape.backward(rgb, seed, [xv])
    out = FieldSample(sigma.value, rgb.value, d_sigma, d_rgb)
    if single:
        return FieldSample(*(a[0] for a in out))
    return out


# --------------------------------------------------------------------------
# medium
# --------------------------------------------------------------------------


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    out = np.full(y.shape, -40.0)
    pos = y > 1e-17
    out[pos] = y[pos] + np.log(-np.expm1(-y[pos]))
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


@dataclass
class MediumParams:
    """Per-channel medium colour, backscatter and attenuation, stored unconstrained.

    Read through ``c_med`` (sigmoid) and ``sigma_bs`` / ``sigma_attn``
    (softplus).  A zero coefficient is stored as a raw value of -40, which
    reads back as ~4e-18.
    """

    raw_c: np.ndarray = field(default_factory=lambda: np.zeros(3))
    raw_bs: np.ndarray = field(default_factory=lambda: np.zeros(3))
    raw_attn: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_values(cls, c_med, sigma_bs, sigma_attn, dtype=np.float64) -> "MediumParams":
        c_med, sigma_bs, sigma_attn = (np.broadcast_to(np.asarray(v, float), (3,)) for v in (c_med, sigma_bs, sigma_attn))
        if np.any(c_med < 0) or np.any(c_med > 1):
            raise ContractError("medium colour must lie in [0, 1]")
        if np.any(sigma_bs < 0) or np.any(sigma_attn < 0):
            raise ContractError("medium coefficients must be >= 0")
        return cls(
            _logit(c_med).astype(dtype), _inv_softplus(sigma_bs).astype(dtype), _inv_softplus(sigma_attn).astype(dtype)
        )

    @property
    def dtype(self):
        return self.raw_c.dtype

    def astype(self, dtype) -> "MediumParams":
        return MediumParams(self.raw_c.astype(dtype), self.raw_bs.astype(dtype), self.raw_attn.astype(dtype))

    @property
    def c_med(self) -> np.ndarray:
        return diff._OPS["sigmoid"].forward(self.raw_c)

    @property
    def sigma_bs(self) -> np.ndarray:
        return diff._softplus(self.raw_bs)

    @property
    def sigma_attn(self) -> np.ndarray:
        return diff._softplus(self.raw_attn)

    def blocks(self) -> dict[str, np.ndarray]:
        return {"medium.c": self.raw_c, "medium.bs": self.raw_bs, "medium.attn": self.raw_attn}


class MediumVars(NamedTuple):
    c_med: Var
    sigma_bs: Var
    sigma_attn: Var
    leaves: tuple[Var, ...]


def medium_vars(tape: Tape, medium: MediumParams, trainable: bool = False) -> MediumVars:
    make = tape.leaf if trainable else tape.const
    rc, rb, ra = make(medium.raw_c), make(medium.raw_bs), make(medium.raw_attn)
    return MediumVars(diff.sigmoid(rc), diff.softplus(rb), diff.softplus(ra), (rc, rb, ra))


@dataclass(frozen=True)
class FixedMedium:
    """Medium given directly by constrained values (used by tests and oracles)."""

    c_med: np.ndarray
    sigma_bs: np.ndarray
    sigma_attn: np.ndarray

    def __post_init__(self):
        for name in ("c_med", "sigma_bs", "sigma_attn"):
            object.__setattr__(self, name, np.broadcast_to(np.asarray(getattr(self, name), float), (3,)).copy())
        if np.any(self.sigma_bs < 0) or np.any(self.sigma_attn < 0):
            raise ContractError("medium coefficients must be >= 0")
        if np.any(self.c_med < 0) or np.any(self.c_med > 1):
            raise ContractError("medium colour must lie in [0, 1]")


def medium_on_tape(tape: Tape, medium) -> MediumVars:
    if isinstance(medium, MediumVars):
        return medium
    if isinstance(medium, FixedMedium):
        c, b, a = tape.const(medium.c_med), tape.const(medium.sigma_bs), tape.const(medium.sigma_attn)
        return MediumVars(c, b, a, ())
    return medium_vars(tape, medium, trainable=False)


ZERO_MEDIUM = FixedMedium(np.zeros(3), np.zeros(3), np.zeros(3))


# --------------------------------------------------------------------------
# checkpoint file
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"UWNERFC1"
_ARCH_FMT = "<9i4d"


def save_checkpoint(path, params: FieldParams, medium: MediumParams) -> None:
    """Little-endian layout: magic, dtype width, architecture, then blocks in order.

    Each block is ``uint32 ndim, uint32 dims..., raw values``.  Field blocks
    come first in architecture order, then ``medium.c``, ``medium.bs``,
    ``medium.attn``.
    """
    arch = params.arch
    pe = arch.posenc
    width = np.dtype(params.dtype).itemsize
    if np.dtype(medium.dtype).itemsize != width:
        medium = medium.astype(params.dtype)
    header = struct.pack(
        _ARCH_FMT,
        arch.width,
        arch.depth,
        arch.skip_at,
        arch.color_width,
        pe.frequencies_position,
        pe.frequencies_direction,
        int(pe.include_raw),
        _ACTIVATION_CODES[arch.activation],
        width,
        *arch.center,
        float(arch.scale),
    )
    out = bytearray(CHECKPOINT_MAGIC + header)
    le = np.dtype(params.dtype).newbyteorder("<")
    for block in list(params.blocks.values()) + list(medium.blocks().values()):
        out += struct.pack("<I", block.ndim) + struct.pack(f"<{block.ndim}I", *block.shape)
        out += np.ascontiguousarray(block, dtype=le).tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[FieldParams, MediumParams]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path}: not a field checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    vals = struct.unpack_from(_ARCH_FMT, data, pos)
    pos += struct.calcsize(_ARCH_FMT)
    width, depth, skip_at, color_width, lx, ld, raw, act, item = vals[:9]
    codes = {v: k for k, v in _ACTIVATION_CODES.items()}
    arch = Architecture(
        width=width,
        depth=depth,
        skip_at=skip_at,
        color_width=color_width,
        posenc=PosEncConfig(lx, ld, bool(raw)),
        activation=codes[act],
        center=tuple(vals[9:12]),
        scale=vals[12],
    )
    dtype = np.dtype({4: np.float32, 8: np.float64}[item]).newbyteorder("<")

    def read_block():
        nonlocal pos
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += count * item
        return arr.astype(dtype.newbyteorder("="))

    blocks = {name: read_block() for name, _ in arch.layer_shapes()}
    medium = MediumParams(read_block(), read_block(), read_block())
    return FieldParams(arch, blocks), medium


def with_input_transform(arch: Architecture, bounds: SceneBounds) -> Architecture:
    """Architecture whose input map sends ``bounds`` into roughly [-1, 1]^3."""
    return replace(arch, center=tuple(bounds.center), scale=float(2.0 / np.max(bounds.extent)))
