import numpy as np
import pytest

from conftest import BOX, rays_through_box, tiny_arch, tiny_field
from uwnerf.dataset import Dataset
from uwnerf.diff import ContractError
from uwnerf.field import FixedMedium, NeuralField, zero_field_params
from uwnerf.laplace import (
    FisherDiag,
    UncertaintyField,
    UQConfig,
    accumulate_fisher,
    accumulate_fisher_rays,
    build_uncertainty_field,
    covariance_diag,
    default_lambda,
    export_volume,
    jtj_sums,
    read_volume,
    render_pixel_uncertainty,
    render_uncertainty_rays,
    uncertainty_at,
)
from uwnerf.perturb import PerturbGrid, vertex_positions
from uwnerf.render import Camera, Ray, RayBatch, RenderConfig, look_at

MEDIUM = FixedMedium((0.1, 0.3, 0.5), (0.4, 0.3, 0.2), (0.5, 0.4, 0.3))
CFG = RenderConfig(n_samples=16, t_near=1.0, t_far=5.0, bounds=BOX)


def test_default_lambda():
    assert default_lambda(256) == 1e-4 / 256**3
    assert UQConfig().lambda_for(4) == 1e-4 / 64
    assert UQConfig(lam=0.5).lambda_for(4) == 0.5
    with pytest.raises(ContractError):
        UQConfig(lam=0.0)
    with pytest.raises(ContractError):
        UQConfig(iterations=0)


def test_zero_weight_field_gives_prior_only():
    field = NeuralField(zero_field_params(tiny_arch()))
    lam = 1e-3
    f = accumulate_fisher_rays(field, MEDIUM, PerturbGrid.zeros(4, BOX), [rays_through_box(6)], CFG, lam)
    np.testing.assert_array_equal(f.entries, 2 * lam)
    assert f.ray_count == 6


def test_untouched_vertex_entries_equal_two_lambda():
    ray = Ray((-0.9, -0.9, -0.9), (1.0, 0.0, 0.0), 0.01, 0.5)
    cfg = RenderConfig(n_samples=8, t_near=0.01, t_far=0.5, bounds=BOX)
    f = accumulate_fisher_rays(tiny_field(0), MEDIUM, PerturbGrid.zeros(4, BOX), [RayBatch.from_rays([ray])], cfg, 0.5)
    np.testing.assert_array_equal(f.entries[63], [1.0, 1.0, 1.0])
    assert np.all(f.entries >= 1.0)
    assert np.any(f.entries[0] > 1.0)


def test_more_rays_never_shrink_sums():
    grid = PerturbGrid.zeros(4, BOX)
    rays = rays_through_box(12, seed=7)
    v1, s1 = jtj_sums(tiny_field(0), MEDIUM, grid, rays[:6], CFG)
    v2, s2 = jtj_sums(tiny_field(0), MEDIUM, grid, rays, CFG)
    full1 = np.zeros((64, 3))
    full2 = np.zeros((64, 3))
    full1[v1] = s1
    full2[v2] = s2
    assert np.all(full2 >= full1)


def test_batching_and_threads_do_not_change_result():
    grid = PerturbGrid.zeros(4, BOX)
    rays = rays_through_box(12, seed=8)
    a = accumulate_fisher_rays(tiny_field(1), MEDIUM, grid, [rays[:4], rays[4:8], rays[8:]], CFG, 1e-3)
    b = accumulate_fisher_rays(tiny_field(1), MEDIUM, grid, [rays[:4], rays[4:8], rays[8:]], CFG, 1e-3, threads=3)
    c = accumulate_fisher_rays(tiny_field(1), MEDIUM, grid, [rays], CFG, 1e-3)
    assert np.array_equal(a.entries, b.entries)
    np.testing.assert_allclose(a.entries, c.entries, rtol=1e-12)


def tiny_dataset():
    cams = [Camera(8.0, 8.0, 4.0, 4.0, 8, 8, look_at(eye, (0, 0, 0))) for eye in [(3, 0, 1), (0, 3, 1), (-3, 0, 1)]]
    images = np.random.default_rng(0).random((3, 8, 8, 3)).astype(np.float32)
    return Dataset(images, cams, ["train", "train", "eval"], BOX, near=1.0, far=5.0)


def test_accumulate_fisher_is_deterministic():
    ds = tiny_dataset()
    grid = PerturbGrid.zeros(4, BOX)
    cfg = UQConfig(iterations=3, rays_per_iteration=8, seed=2)
    a = accumulate_fisher(tiny_field(0), MEDIUM, ds, grid, cfg, CFG)
    b = accumulate_fisher(tiny_field(0), MEDIUM, ds, grid, cfg, CFG, threads=2)
    assert np.array_equal(a.entries, b.entries)
    assert a.ray_count == 24 and a.lam == 1e-4 / 64
    assert np.all(covariance_diag(a) <= 1 / (2 * a.lam))
    with pytest.raises(ContractError):
        accumulate_fisher(tiny_field(0), MEDIUM, ds, PerturbGrid(4, np.ones((64, 3)), BOX), cfg, CFG)


def test_covariance_is_reciprocal():
    f = FisherDiag(np.array([[4.0, 1.0, 0.5]]), 1, 0.25)
    np.testing.assert_array_equal(covariance_diag(f), [[0.25, 1.0, 2.0]])
    with pytest.raises(ContractError):
        covariance_diag(FisherDiag(np.zeros((1, 3)), 1, 0.1))


def test_build_field():
    var = np.ones((8, 3))
    var[3] = (4.0, 9.0, 36.0)
    u = build_uncertainty_field(var, 2, BOX)
    np.testing.assert_allclose(u.sigma_norm[0], np.sqrt(3.0))
    np.testing.assert_allclose(u.sigma_axes[3], [2.0, 3.0, 6.0])
    np.testing.assert_allclose(u.sigma_norm[3], 7.0)
    np.testing.assert_allclose(u.sigma_norm**2, (u.sigma_axes**2).sum(axis=1), rtol=1e-12)
    with pytest.raises(ContractError):
        build_uncertainty_field(-var, 2, BOX)


def test_prior_only_field_is_constant():
    lam = 1e-3
    u = build_uncertainty_field(np.full((27, 3), 1 / (2 * lam)), 3, BOX)
    x = np.random.default_rng(0).uniform(-1.2, 1.2, (50, 3))
    np.testing.assert_array_equal(uncertainty_at(u, x), u.sigma_norm[0])


def test_stronger_fisher_means_smaller_sigma():
    f = np.full((8, 3), 2.0)
    g = f.copy()
    g[5, 1] = 3.0
    a = build_uncertainty_field(1 / f, 2, BOX)
    b = build_uncertainty_field(1 / g, 2, BOX)
    assert b.sigma_axes[5, 1] < a.sigma_axes[5, 1]


def test_uncertainty_at_vertices_and_centre():
    vals = np.random.default_rng(1).random(27)
    u = UncertaintyField(3, np.zeros((27, 3)), vals, BOX)
    np.testing.assert_allclose(uncertainty_at(u, vertex_positions(BOX, 3)), vals, atol=1e-15)
    centre = uncertainty_at(u, [-0.5, -0.5, -0.5])
    corner_ids = [0, 1, 3, 4, 9, 10, 12, 13]
    np.testing.assert_allclose(centre, vals[corner_ids].mean(), atol=1e-15)


def test_pixel_uncertainty_of_constant_field():
    u = UncertaintyField(4, np.zeros((64, 3)), np.full(64, 0.7), BOX)
    ray = Ray((0.1, -3.0, 0.2), (0.0, 1.0, 0.0), 1.0, 5.0)
    value, empty = render_pixel_uncertainty(tiny_field(0), MEDIUM, u, ray, CFG)
    assert not empty
    np.testing.assert_allclose(value, 0.7, rtol=1e-9)


def test_empty_ray_reports_zero_and_flag():
    u = UncertaintyField(4, np.zeros((64, 3)), np.full(64, 0.7), BOX)
    ray = Ray((0.0, -3.0, 5.0), (0.0, 1.0, 0.0), 1.0, 5.0)
    value, empty = render_pixel_uncertainty(tiny_field(0), MEDIUM, u, ray, CFG)
    assert empty and value == 0.0


def test_max_mode_dominates_mean_mode():
    u = UncertaintyField(4, np.zeros((64, 3)), np.random.default_rng(2).random(64), BOX)
    rays = rays_through_box(30, seed=9)
    mean = render_uncertainty_rays(tiny_field(0), MEDIUM, u, rays, CFG, "mean")
    peak = render_uncertainty_rays(tiny_field(0), MEDIUM, u, rays, CFG, "max")
    assert np.all(peak.value >= mean.value - 1e-12)
    with pytest.raises(ContractError):
        render_uncertainty_rays(tiny_field(0), MEDIUM, u, rays, CFG, "median")


def test_volume_roundtrip(tmp_path):
    vals = np.random.default_rng(3).random(64).astype(np.float32).astype(np.float64)
    u = UncertaintyField(4, np.zeros((64, 3)), vals, BOX)
    path = tmp_path / "u.vol"
    export_volume(u, path)
    m, bounds, body = read_volume(path)
    assert m == 4 and body.size == 64
    assert bounds == BOX
    assert np.array_equal(body, vals)
    assert path.stat().st_size == 8 + 4 + 48 + 64 * 4


def test_volume_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.vol"
    path.write_bytes(b"\0" * 100)
    with pytest.raises(ContractError):
        read_volume(path)
