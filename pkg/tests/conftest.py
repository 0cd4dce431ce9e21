from __future__ import annotations

import numpy as np
import pytest

from uwnerf.field import Architecture, FieldParams, NeuralField, PosEncConfig, SceneBounds, init_field_params
from uwnerf.render import RayBatch

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


BOX = SceneBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def tiny_arch(activation: str = "softplus") -> Architecture:
    return Architecture(
        width=8,
        depth=2,
        skip_at=1,
        color_width=8,
        posenc=PosEncConfig(frequencies_position=2, frequencies_direction=1),
        activation=activation,
    )


def tiny_params(seed: int = 0, activation: str = "softplus", gain: float = 1.0) -> FieldParams:
    p = init_field_params(tiny_arch(activation), seed, np.float64)
    if gain != 1.0:
        p = FieldParams(p.arch, {k: v * gain for k, v in p.blocks.items()})
    return p


def tiny_field(seed: int = 0, **kw) -> NeuralField:
    return NeuralField(tiny_params(seed, **kw))


def rays_through_box(n: int, seed: int = 0, radius: float = 3.0, near: float = 1.0, far: float = 5.0) -> RayBatch:
    """Rays from a sphere of cameras aimed at random points inside the unit box."""
    rng = np.random.default_rng(seed)
    o = rng.normal(size=(n, 3))
    o *= radius / np.linalg.norm(o, axis=1, keepdims=True)
    target = rng.uniform(-0.6, 0.6, size=(n, 3))
    d = target - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(o, d, np.full(n, near), np.full(n, far))


@pytest.fixture
def box():
    return BOX
