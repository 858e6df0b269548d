import math

import pytest
import torch

from core.exceptions import DivergenceError
from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE
from services.data_eval import (
    DensityGrid,
    Dataset2D,
    density_grid,
    grid_centers,
    grid_kl,
    histogram_mass,
    make_auxiliary,
    make_dataset,
    make_spiral,
    median_bandwidth,
    mmd_rbf,
    spiral_distance,
)
from services.diffnet import MlpNet
from services.langevin_flow import EbmModel
from services.normflow import FlowModel, flow_sample, prior_logprob


class TestSpiral:
    def test_noise_free_points_lie_on_curve(self):
        data = make_spiral(2000, 0.0, Rng(0))
        p = data.points
        r = torch.linalg.vector_norm(p, dim=1)
        t = r / 0.9 * 3.0 * math.pi
        keep = r > 1e-6
        torch.testing.assert_close(p[keep, 0], r[keep] * torch.cos(t[keep]), rtol=0, atol=1e-12)
        torch.testing.assert_close(p[keep, 1], r[keep] * torch.sin(t[keep]), rtol=0, atol=1e-12)

    def test_noise_free_distance_is_zero(self):
        data = make_spiral(500, 0.0, Rng(1))
        assert float(spiral_distance(data.points).max()) < 1e-3

    def test_bounded(self):
        data = make_spiral(10000, 0.05, Rng(2))
        assert float(data.points.abs().max()) <= 1.3
        assert data.generator_id == "spiral"

    def test_reproducible(self):
        assert torch.equal(make_spiral(300, 0.05, Rng(3)).points, make_spiral(300, 0.05, Rng(3)).points)

    @pytest.mark.parametrize("n, sigma", [(0, 0.05), (10, -0.1)])
    def test_preconditions(self, n, sigma):
        with pytest.raises(ValueError):
            make_spiral(n, sigma, Rng(0))


class TestAuxiliary:
    def test_eight_gaussians_centers(self):
        data = make_auxiliary("eight-gaussians", 2000, Rng(0))
        angles = torch.arange(8, dtype=DTYPE) * (math.pi / 4.0)
        centers = 0.8 * torch.stack([torch.cos(angles), torch.sin(angles)], dim=1)
        nearest = torch.cdist(data.points, centers).min(dim=1).values
        assert float(nearest.max()) < 6 * 0.05

    def test_two_rings_radii(self):
        data = make_auxiliary("two-rings", 2000, Rng(0))
        r = torch.linalg.vector_norm(data.points, dim=1)
        gap = torch.minimum((r - 0.4).abs(), (r - 0.8).abs())
        assert float(gap.max()) < 6 * 0.02
        assert bool((r < 0.6).any()) and bool((r > 0.6).any())

    def test_checkerboard_cells(self):
        data = make_auxiliary("checkerboard", 2000, Rng(0))
        cells = torch.floor((data.points + 1.0) / 0.5)
        assert bool((torch.remainder(cells.sum(dim=1), 2) == 0).all())

    def test_rejects_zero_and_unknown(self):
        with pytest.raises(ValueError):
            make_auxiliary("two-rings", 0, Rng(0))
        with pytest.raises(ValueError):
            make_auxiliary("swiss-roll", 10, Rng(0))

    def test_make_dataset_dispatch(self):
        assert make_dataset("two-rings", 10, 0.05, Rng(0)).generator_id == "two-rings"

    def test_dataset_bounds_enforced(self):
        with pytest.raises(ValueError):
            Dataset2D(torch.tensor([[3.0, 0.0]], dtype=DTYPE), "manual", {}, (-1.5, 1.5))


class TestMmd:
    def test_identical_sets_give_zero(self, rng):
        x = gaussian_sample(rng, 300, 2)
        assert mmd_rbf(x, x) == 0.0

    def test_symmetric(self, rng):
        x = gaussian_sample(rng, 200, 2)
        y = gaussian_sample(rng, 150, 2) + 0.3
        assert mmd_rbf(x, y) == mmd_rbf(y, x)
        assert mmd_rbf(x, y, "median") == mmd_rbf(y, x, "median")

    def test_same_distribution_small(self, rng):
        x = gaussian_sample(rng, 2000, 2)
        y = gaussian_sample(rng, 2000, 2)
        assert mmd_rbf(x, y, 0.5) < 0.02

    def test_shifted_distribution_large(self, rng):
        x = gaussian_sample(rng, 2000, 2)
        y = gaussian_sample(rng, 2000, 2) + 3.0
        assert mmd_rbf(x, y, 0.5) > 0.5

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            mmd_rbf(gaussian_sample(rng, 1, 2), gaussian_sample(rng, 5, 2))

    def test_median_bandwidth_positive(self, rng):
        assert median_bandwidth(gaussian_sample(rng, 50, 2), gaussian_sample(rng, 50, 2)) > 0


class TestGridKl:
    def test_same_grid_is_zero(self):
        grid = density_grid(EbmModel(MlpNet.zeros([2, 4, 1]), "standard-gaussian"), (-3.0, 3.0), 32)
        assert grid_kl(grid, grid, 32) == 0.0

    def test_disjoint_histograms_finite_and_large(self, rng):
        left = 0.05 * gaussian_sample(rng, 500, 2) - 0.8
        right = 0.05 * gaussian_sample(rng, 500, 2) + 0.8
        kl = grid_kl(left, right, 32, bounds=(-1.5, 1.5))
        assert math.isfinite(kl)
        assert kl > 5.0

    def test_non_negative(self, rng):
        a = gaussian_sample(rng, 400, 2) * 0.5
        b = gaussian_sample(rng, 400, 2) * 0.4
        assert grid_kl(a, b, 20, bounds=(-2.0, 2.0)) >= 0.0

    def test_resolution_floor(self, rng):
        x = gaussian_sample(rng, 10, 2)
        with pytest.raises(ValueError):
            grid_kl(x, x, 8)

    def test_bound_mismatch(self):
        ebm = EbmModel(MlpNet.zeros([2, 4, 1]), "standard-gaussian")
        with pytest.raises(ValueError):
            grid_kl(density_grid(ebm, (-3.0, 3.0), 16), density_grid(ebm, (-2.0, 2.0), 16), 16)

    def test_density_grids_use_exact_mass(self):
        # f = ±3·x_0, 셀 질량 ∝ exp(±3·x_0)
        bounds, g = (-4.0, 4.0), 100
        plus = EbmModel(MlpNet.zeros([2, 1]).with_flat_params(torch.tensor([3.0, 0.0, 0.0], dtype=DTYPE)))
        minus = EbmModel(MlpNet.zeros([2, 1]).with_flat_params(torch.tensor([-3.0, 0.0, 0.0], dtype=DTYPE)))
        centers, _ = grid_centers(bounds, g)
        pm = torch.softmax(3.0 * centers[:, 0], dim=0)
        qm = torch.softmax(-3.0 * centers[:, 0], dim=0)
        expected = float((pm * (pm.log() - qm.log())).sum())

        p_grid, q_grid = density_grid(plus, bounds, g), density_grid(minus, bounds, g)
        assert grid_kl(p_grid, q_grid, g) == pytest.approx(expected, rel=1e-9)
        assert grid_kl(p_grid, q_grid, g, smoothing=1e-2) == pytest.approx(expected, rel=1e-9)

    def test_histogram_mass_sums_to_one(self, rng):
        mass = histogram_mass(gaussian_sample(rng, 100, 2), (-2.0, 2.0), 16)
        assert abs(float(mass.sum()) - 1.0) < 1e-12


class TestDensityGrid:
    def test_identity_flow_is_standard_normal(self, rng):
        flow = FlowModel.init(2, 2, [4], rng)
        grid = density_grid(flow, (-2.0, 2.0), 10)
        h = 0.4
        axis = -2.0 + (torch.arange(10, dtype=DTYPE) + 0.5) * h
        yy, xx = torch.meshgrid(axis, axis, indexing="ij")
        centers = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)
        assert grid.kind == "flow"
        assert torch.equal(grid.values, prior_logprob(centers).reshape(10, 10))

    def test_ebm_grid_normalized(self, rng):
        ebm = EbmModel.init(2, [8], rng)
        grid = density_grid(ebm, (-1.5, 1.5), 50)
        assert abs(float(grid.values.sum()) * grid.cell_area - 1.0) < 1e-9
        assert grid.normalizer > 0
        assert isinstance(grid, DensityGrid)

    def test_zero_ebm_matches_standard_normal(self):
        ebm = EbmModel(MlpNet.zeros([2, 8, 1]), "standard-gaussian")
        grid = density_grid(ebm, (-4.0, 4.0), 400)
        axis = -4.0 + (torch.arange(400, dtype=DTYPE) + 0.5) * 0.02
        yy, xx = torch.meshgrid(axis, axis, indexing="ij")
        analytic = torch.exp(-0.5 * (xx ** 2 + yy ** 2)) / (2.0 * math.pi)
        assert float((grid.values - analytic).abs().max()) < 1e-3
        assert abs(grid.normalizer - 2.0 * math.pi) < 1e-2

    def test_values_indexed_by_row_y(self):
        # f(x) = x_1 이면 y 가 커질수록 밀도가 커짐
        net = MlpNet.zeros([2, 1], "tanh")
        net = net.with_flat_params(torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE))
        grid = density_grid(EbmModel(net), (-1.0, 1.0), 16)
        assert float(grid.values[-1, 0]) > float(grid.values[0, 0])
        torch.testing.assert_close(grid.values[:, 0], grid.values[:, -1], rtol=0, atol=1e-15)

    def test_flow_grid_matches_sample_histogram(self):
        flow = FlowModel.init(2, 4, [8], Rng(11), identity=False)
        flow = flow.with_flat_params(0.3 * flow.flat_params())
        grid = density_grid(flow, (-6.0, 6.0), 20)
        _, samples = flow_sample(flow, 20000, Rng(12))
        assert grid_kl(samples, grid, 20, bounds=(-6.0, 6.0)) < 0.05

    def test_flow_box_mass_matches_monte_carlo(self):
        # 변수변환 밀도의 [-1, 1]² 적분 vs 샘플 비율
        flow = FlowModel.init(2, 4, [8], Rng(13), identity=False)
        grid = density_grid(flow, (-1.0, 1.0), 200)
        integral = float(torch.exp(grid.values).sum()) * grid.cell_area
        _, samples = flow_sample(flow, 40000, Rng(14))
        inside = float((samples.abs() <= 1.0).all(dim=1).to(DTYPE).mean())
        assert abs(integral - inside) < 0.01

    def test_non_finite_energy(self):
        net = MlpNet.zeros([2, 1]).with_flat_params(torch.tensor([float("nan"), 0.0, 0.0], dtype=DTYPE))
        with pytest.raises(DivergenceError):
            density_grid(EbmModel(net), (-1.0, 1.0), 8)
