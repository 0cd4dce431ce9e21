"""End-to-end acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run.
"""

from __future__ import annotations

import math
import re
import subprocess
import sys
import time
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE, BOX, rays_through_box, tiny_field
from uwnerf import diff
from uwnerf.cleanup import normalize_field, thresholded_render_image, top_fraction_tau
from uwnerf.cli import main as cli_main
from uwnerf.dataset import load_dataset
from uwnerf.diff import Tape
from uwnerf.field import FixedMedium, NeuralField, load_checkpoint
from uwnerf.images import read_raw
from uwnerf.laplace import (
    UQConfig,
    accumulate_fisher,
    accumulate_fisher_rays,
    build_uncertainty_field,
    covariance_diag,
    read_volume,
)
from uwnerf.metrics import ause, psnr, removal_order
from uwnerf.perturb import PerturbGrid, cell_weights, perturbed_render_rays, ray_jacobians, vertex_positions
from uwnerf.render import RenderConfig, SampleSet, composite_seathru, composite_vanilla, render_image, sample_batch, samples_for, trace_rays
from uwnerf.synth import BlobField, CameraRig, WaterParams, apply_water, default_scene, render_clean_gt, trace_scene

MEDIUM = FixedMedium((0.2, 0.4, 0.6), (0.3, 0.2, 0.1), (0.2, 0.3, 0.4))


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)


def run_cli(*args) -> int:
    return cli_main([str(a) for a in args])


# --------------------------------------------------------------------------
# shared desk-scale pipeline: synth -> train -> render -> uq
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data, run, renders, uq = root / "data", root / "run", root / "renders", root / "uq"
    t0 = time.perf_counter()
    assert run_cli("synth", "--views", 16, "--res", 64, "--seed", 0, "--out", data) == 0
    assert run_cli("train", "--data", data, "--out", run, "--steps", 2000, "--seed", 0) == 0
    assert run_cli("render", "--data", data, "--checkpoint", run / "checkpoint.bin", "--out", renders, "--views", "eval") == 0
    train_seconds = time.perf_counter() - t0
    assert run_cli(
        "uq", "--data", data, "--checkpoint", run / "checkpoint.bin", "--out", uq,
        "--grid", 32, "--iterations", 200, "--views", "eval",
    ) == 0
    return dict(root=root, data=data, run=run, renders=renders, uq=uq, seconds=train_seconds)


# --------------------------------------------------------------------------
# 1. gradient correctness
# --------------------------------------------------------------------------


def test_c01_jacobian_matches_finite_differences():
    t0 = time.perf_counter()
    m = 4
    field = tiny_field(3, gain=1.5)
    rays = rays_through_box(100, seed=1)
    cfg = RenderConfig(n_samples=16, t_near=1.0, t_far=5.0, bounds=BOX)
    jac = ray_jacobians(field, MEDIUM, PerturbGrid.zeros(m, BOX), rays, cfg)
    analytic = np.zeros((len(rays), m**3, 3, 3))
    analytic[jac.ray, jac.vertex] = jac.values
    h = 1e-3
    fd = np.zeros_like(analytic)
    for v, a in product(range(m**3), range(3)):
        omega = np.zeros((m**3, 3))
        omega[v, a] = h
        plus = perturbed_render_rays(field, MEDIUM, PerturbGrid(m, omega, BOX), rays, cfg).color
        minus = perturbed_render_rays(field, MEDIUM, PerturbGrid(m, -omega, BOX), rays, cfg).color
        fd[:, v, a, :] = (plus - minus) / (2 * h)
    rel = np.abs(analytic - fd).max() / np.abs(fd).max()
    seconds = time.perf_counter() - t0
    ok = rel < 1e-4 and seconds < 60
    record(1, ok, f"max rel error {rel:.2e} (< 1e-4), {seconds:.1f} s (< 60 s)")
    assert rel < 1e-4
    assert seconds < 60


# --------------------------------------------------------------------------
# 2. mode identity
# --------------------------------------------------------------------------


def test_c02_zero_perturbation_is_bit_identical(pipeline):
    ds = load_dataset(pipeline["data"])
    params, medium = load_checkpoint(pipeline["run"] / "checkpoint.bin")
    field = NeuralField(params)
    cam = ds.cameras[ds.views("eval")[0]]
    cfg = RenderConfig(64, False, ds.near, ds.far, ds.bounds)
    base = render_image(field, medium, cam, cfg)
    rays = cam.rays(ds.near, ds.far)
    pert = perturbed_render_rays(field, medium, PerturbGrid.zeros(32, ds.bounds), rays, cfg).reshape(64, 64)
    same = np.array_equal(base.color, pert.color) and np.array_equal(base.weights_obj, pert.weights_obj)
    record(2, same, f"64x64 image, max |diff| {np.abs(base.color - pert.color).max():.1e}")
    assert same


# --------------------------------------------------------------------------
# 3. medium-zero reduction
# --------------------------------------------------------------------------


def test_c03_zero_medium_reduces_to_vanilla():
    rng = np.random.default_rng(3)
    zero = FixedMedium(rng.random(3), np.zeros(3), np.zeros(3))
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        near = rng.uniform(0.1, 2.0)
        samples = sample_batch([near], [near + rng.uniform(0.5, 8.0)], n, rng.random((1, n)))
        samples = SampleSet(samples.t[0], samples.delta[0])
        sigma = rng.exponential(2.0, n) * (rng.random(n) < 0.7)
        color = rng.random((n, 3))
        a = composite_seathru(sigma, color, zero, samples).color
        b = composite_vanilla(sigma, color, samples)
        worst = max(worst, float(np.abs(a - b).max()))
    record(3, worst <= 1e-6, f"max |diff| {worst:.1e} over 1000 rays (<= 1e-6)")
    assert worst <= 1e-6


# --------------------------------------------------------------------------
# 4. telescoping medium render
# --------------------------------------------------------------------------


def test_c04_medium_only_telescopes():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 129))
        near = rng.uniform(0.0, 3.0)
        far = near + rng.uniform(0.1, 10.0)
        jitter = rng.random((1, n)) if rng.random() < 0.5 else None
        s = sample_batch([near], [far], n, jitter)
        samples = SampleSet(s.t[0], s.delta[0])
        c_med = rng.random(3)
        s_bs = rng.uniform(0, 2, 3)
        medium = FixedMedium(c_med, s_bs, rng.uniform(0, 2, 3))
        out = composite_seathru(np.zeros(n), rng.random((n, 3)), medium, samples)
        t1, t_end = samples.t[0], samples.t[-1] + samples.delta[-1]
        expected = c_med * (np.exp(-s_bs * t1) - np.exp(-s_bs * t_end))
        worst = max(worst, float(np.abs(out.color_med - expected).max()))
    record(4, worst <= 1e-6, f"max |diff| {worst:.1e} over 100 configurations (<= 1e-6)")
    assert worst <= 1e-6


# --------------------------------------------------------------------------
# 5. Fisher oracle
# --------------------------------------------------------------------------


def brute_force_fisher(field, medium, m, bounds, rays, cfg, lam):
    """Dense per-ray Jacobians through the grid table itself, squared and summed."""
    total = np.zeros((m**3, 3))
    for r in range(len(rays)):
        sub = rays[r : r + 1]
        tape = Tape(np.float64)
        omega = tape.leaf(np.zeros((m**3, 3)))

        def displace(pos, pos_np):
            ids, w = cell_weights(bounds, m, pos_np)
            return pos + diff.trilinear(omega, ids, w) * bounds.extent

        tr = trace_rays(tape, field, medium, sub, samples_for(sub, cfg), "full", cfg.bounds, displace=displace)
        color = tr.outputs["color"]
        for c in range(3):
            seed = np.zeros((1, 3))
            seed[0, c] = 1.0
            (g,) = tape.backward(color, seed, [omega])
            total += g * g
    return 2 * lam + (2.0 / len(rays)) * total


def test_c05_fisher_matches_brute_force():
    m = 4
    lam = 1e-4 / m**3
    field = tiny_field(5, gain=1.5)
    rays = rays_through_box(10, seed=2)
    cfg = RenderConfig(n_samples=16, t_near=1.0, t_far=5.0, bounds=BOX)
    fisher = accumulate_fisher_rays(field, MEDIUM, PerturbGrid.zeros(m, BOX), [rays], cfg, lam)
    oracle = brute_force_fisher(field, MEDIUM, m, BOX, rays, cfg, lam)
    gap = float(np.abs(fisher.entries - oracle).max())
    var = covariance_diag(fisher)
    floor_ok = bool(np.all(fisher.entries >= 2 * lam))
    var_ok = bool(np.all(var <= 1 / (2 * lam)))
    ok = gap <= 1e-10 and floor_ok and var_ok
    record(5, ok, f"max |F - oracle| {gap:.1e} (<= 1e-10), entries >= 2 lambda: {floor_ok}, variances <= 1/(2 lambda): {var_ok}")
    assert gap <= 1e-10
    assert floor_ok and var_ok


# --------------------------------------------------------------------------
# 6. AUSE oracle
# --------------------------------------------------------------------------


def brute_force_ause(errors, unc):
    """Sort-based sparsification with explicit Python loops."""
    n = len(errors)
    total = math.fsum(errors) / n

    def curve(rank):
        order = sorted(range(n), key=lambda i: (-rank[i], i))
        vals = []
        for step in range(100):
            k = math.ceil(step * n / 100)
            rest = [errors[i] for i in order[k:]]
            vals.append((math.fsum(rest) / len(rest) if rest else 0.0) / total)
        return vals

    cu, co = curve(unc), curve(errors)
    return sum(0.01 * 0.5 * ((cu[i] - co[i]) + (cu[i + 1] - co[i + 1])) for i in range(99))


def test_c06_ause_matches_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(50):
        e = rng.random(100)
        u = rng.random(100)
        worst = max(worst, abs(ause(e, u) - brute_force_ause(list(e), list(u))))
    e, u = rng.random(100), rng.random(100)
    self_zero = ause(e, e) == 0.0
    base = ause(e, u)
    invariant = all(ause(e, t) == base for t in (2 * u + 5, u**3, np.exp(u), np.arctan(10 * u)))
    ok = worst <= 1e-9 and self_zero and invariant
    record(6, ok, f"max |diff| vs oracle {worst:.1e} (<= 1e-9), AUSE(e,e)=0: {self_zero}, monotone invariance: {invariant}")
    assert worst <= 1e-9
    assert self_zero and invariant
    assert np.array_equal(removal_order(u), removal_order(np.exp(u)))


# --------------------------------------------------------------------------
# 7. end-to-end desk run
# --------------------------------------------------------------------------


def test_c07_desk_run(pipeline):
    ds = load_dataset(pipeline["data"])
    losses = np.loadtxt(pipeline["run"] / "loss.csv", delimiter=",", skiprows=1)[:, 1]
    mean_color = ds.images[ds.views("train")].reshape(-1, 3).mean(axis=0)
    gains = []
    for v in ds.views("eval"):
        pred = read_raw(pipeline["renders"] / f"render_full_{v:04d}.raw")
        gt = ds.images[v]
        gains.append(psnr(pred, gt) - psnr(np.broadcast_to(mean_color, gt.shape), gt))
    gain = float(np.mean(gains))
    ratio = float(losses[-1] / losses[0])
    seconds = pipeline["seconds"]
    ok = gain >= 6 and ratio <= 0.1 and seconds < 600
    record(7, ok, f"PSNR gain {gain:.2f} dB (>= 6), loss ratio {ratio:.4f} (<= 0.1), {seconds:.0f} s (< 600 s)")
    assert len(losses) == 2000
    assert gain >= 6
    assert ratio <= 0.1
    assert seconds < 600


# --------------------------------------------------------------------------
# 8. uncertainty geography
# --------------------------------------------------------------------------


def visibility(ds, points):
    """True where a point is inside some training frustum and unobstructed."""
    scene = default_scene()
    seen = np.zeros(len(points), dtype=bool)
    for v in ds.views("train"):
        cam = ds.cameras[v]
        d = points - cam.center
        dist = np.linalg.norm(d, axis=1)
        d = d / dist[:, None]
        local = d @ cam.pose[:, :3]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * local[:, 0] / local[:, 2] + cam.cx
            w = cam.fy * local[:, 1] / local[:, 2] + cam.cy
        in_view = (local[:, 2] > 0) & (u >= 0) & (u < cam.width) & (w >= 0) & (w < cam.height)
        hit, _, _ = trace_scene(scene, np.broadcast_to(cam.center, points.shape).copy(), d)
        seen |= in_view & (hit >= dist - 1e-6)
    return seen


def test_c08_occluded_region_is_more_uncertain(pipeline):
    ds = load_dataset(pipeline["data"])
    m, bounds, sigma_norm = read_volume(pipeline["uq"] / "uncertainty.vol")
    assert m == 32 and bounds == ds.bounds
    x = vertex_positions(bounds, m)
    scene = default_scene()
    cell = float(bounds.extent.max()) / (m - 1)
    seen = visibility(ds, x)
    dist = scene.surface_distance(x)
    occluded = ~seen & scene.inside_any(x) & (dist > cell)
    surface = seen & (dist <= cell)
    ratio = float(sigma_norm[occluded].mean() / sigma_norm[surface].mean())
    record(8, ratio >= 2, f"occluded/surface mean sigma_norm {ratio:.2f} (>= 2; {occluded.sum()} vs {surface.sum()} vertices)")
    assert occluded.sum() > 50 and surface.sum() > 50
    assert ratio >= 2


# --------------------------------------------------------------------------
# 9. cleanup efficacy
# --------------------------------------------------------------------------


def test_c09_cleanup_removes_injected_floater(pipeline):
    ds = load_dataset(pipeline["data"])
    params, medium = load_checkpoint(pipeline["run"] / "checkpoint.bin")
    center, radius = np.array([1.0, 0.0, 2.0]), 0.15
    field = BlobField(NeuralField(params), center, radius, density=50.0)
    cfg = RenderConfig(64, False, ds.near, ds.far, ds.bounds)
    m = 32
    fisher = accumulate_fisher(field, medium, ds, PerturbGrid.zeros(m, ds.bounds), UQConfig(200, 256), cfg)
    u = normalize_field(build_uncertainty_field(covariance_diag(fisher), m, ds.bounds))
    x = vertex_positions(ds.bounds, m)
    blob = np.linalg.norm(x - center, axis=1) < 2 * radius
    decile = np.quantile(u.sigma_norm, 0.9, method="lower")
    in_top = bool(np.all(u.sigma_norm[blob] >= decile))
    tau = top_fraction_tau(u, 0.1)
    assert np.all(u.sigma_norm[blob] > tau)

    # a novel view from above that looks through the floater
    cam = CameraRig().camera_at((2.0, 0.0, 4.0))
    clean, z = render_clean_gt(default_scene(), cam)
    gt = apply_water(clean, z, WaterParams())
    full = render_image(field, medium, cam, cfg)
    at_one = thresholded_render_image(field, medium, u, 1.0, cam, cfg)
    at_tau = thresholded_render_image(field, medium, u, tau, cam, cfg)
    at_zero = thresholded_render_image(field, medium, u, 0.0, cam, cfg)
    medium_only = render_image(field, medium, cam, cfg, "medium-only")
    gain = psnr(at_tau.color, gt) - psnr(at_one.color, gt)
    one_exact = np.array_equal(at_one.color, full.color)
    zero_exact = np.array_equal(at_zero.color, medium_only.color)
    ok = in_top and gain >= 1 and one_exact and zero_exact
    record(9, ok, f"blob in top decile: {in_top}, PSNR gain {gain:.2f} dB (>= 1), tau=1 exact: {one_exact}, tau=0 = medium-only: {zero_exact}")
    assert in_top
    assert gain >= 1
    assert one_exact and zero_exact


# --------------------------------------------------------------------------
# 10. determinism
# --------------------------------------------------------------------------


def _payload(directory: Path) -> dict[str, bytes]:
    keep = (".raw", ".vol", ".bin", ".csv")
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.suffix in keep}


def test_c10_reruns_are_bit_identical(tmp_path):
    outputs = {}
    for tag, threads in (("a", 1), ("b", 8)):
        root = tmp_path / tag
        data, run, uq, ren, cln = (root / n for n in ("data", "run", "uq", "render", "cleanup"))
        common = ["--threads", threads, "--seed", 3]
        assert run_cli("synth", "--views", 4, "--res", 16, "--eval-views", 1, "--out", data, *common) == 0
        assert run_cli("train", "--data", data, "--out", run, "--steps", 15, "--batch-rays", 256, *common) == 0
        ck = run / "checkpoint.bin"
        assert run_cli("uq", "--data", data, "--checkpoint", ck, "--out", uq, "--grid", 8, "--iterations", 6, "--rays-per-iteration", 64, *common) == 0
        assert run_cli("render", "--data", data, "--checkpoint", ck, "--out", ren, "--views", "all", *common) == 0
        assert run_cli("cleanup", "--data", data, "--checkpoint", ck, "--volume", uq / "uncertainty.vol", "--out", cln, "--tau", "1,0.5,0", *common) == 0
        assert run_cli(
            "eval", "--pred", ren / "render_full_0003.raw", "--ref", data / "uw_0003.raw",
            "--uncertainty", uq / "uncertainty_0003.raw", "--out", root / "eval" / "metrics.csv", *common,
        ) == 0
        outputs[tag] = {name: _payload(root / name) for name in ("data", "run", "uq", "render", "cleanup", "eval")}
    mismatched = [
        f"{d}/{f}"
        for d in outputs["a"]
        for f in set(outputs["a"][d]) | set(outputs["b"][d])
        if outputs["a"][d].get(f) != outputs["b"][d].get(f)
    ]
    files = sum(len(v) for v in outputs["a"].values())
    record(10, not mismatched, f"{files} output files compared across two runs (--threads 1 vs 8), mismatches: {mismatched or 'none'}")
    assert files > 20
    assert not mismatched


# --------------------------------------------------------------------------
# 11. default echo
# --------------------------------------------------------------------------


def test_c11_uq_defaults_are_logged():
    proc = subprocess.run([sys.executable, "-m", "uwnerf", "uq"], capture_output=True, text=True)
    m = re.search(r"M=(\d+) lambda=(\S+) \(1e-4/M\^3\) iterations=(\d+)", proc.stderr)
    ok = (
        m is not None
        and int(m.group(1)) == 256
        and float(m.group(2)) == 1e-4 / 256**3
        and int(m.group(3)) == 1000
    )
    line = m.group(0) if m else proc.stderr.strip().splitlines()[:1]
    record(11, ok, f"logged: {line}")
    assert ok
