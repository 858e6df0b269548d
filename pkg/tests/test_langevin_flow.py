import pytest
import torch

from core.exceptions import DivergenceError
from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE
from services.diffnet import MlpNet, finite_diff_grad
from services.langevin_flow import (
    EbmModel,
    ebm_grad,
    energy,
    initial_sample,
    langevin_flow,
    noise_decay_ratio,
    shortrun_sample,
    training_noise_scale,
)
from storage.schemas import LangevinConfig
from tests.conftest import QuadraticEnergy, points


def reference_chain(ebm: EbmModel, x0, delta, n_steps, noise_scale, rng):
    """독립 구현: x_t = x_{t-1} + δ²/2 ∇f + δ·s·ε 를 한 스텝씩"""
    x = x0.clone()
    for _ in range(n_steps):
        leaf = x.detach().requires_grad_(True)
        (g,) = torch.autograd.grad(ebm.energy(leaf).sum(), leaf)
        x = x + (delta ** 2 / 2.0) * g
        if noise_scale > 0:
            x = x + delta * noise_scale * gaussian_sample(rng, x.shape[0], x.shape[1])
    return x


class TestEbmModel:
    def test_zero_net_with_reference_is_gaussian(self):
        ebm = EbmModel(MlpNet.zeros([2, 4, 1]), "standard-gaussian")
        x = gaussian_sample(Rng(0), 10, 2)
        torch.testing.assert_close(energy(ebm, x), -0.5 * (x * x).sum(dim=1), rtol=0, atol=0)
        assert torch.equal(ebm.grad_x(x), -x)
        torch.testing.assert_close(ebm.grad_x(x, create_graph=True), -x, rtol=0, atol=0)

    def test_scalar_output_required(self, rng):
        with pytest.raises(ValueError):
            EbmModel(MlpNet.init([2, 3, 2], rng))

    def test_grad_paths_agree(self, rng):
        ebm = EbmModel.init(2, [8, 8], rng, reference="standard-gaussian")
        x = gaussian_sample(rng, 16, 2)
        torch.testing.assert_close(ebm.grad_x(x), ebm.grad_x(x, create_graph=True).detach(), rtol=0, atol=1e-14)


class TestLangevinFlow:
    def test_quadratic_hand_computed(self):
        cfg = LangevinConfig(n_steps=1, step_size=0.1)
        x = langevin_flow(QuadraticEnergy(lam=1.0), points([1.0, 0.0]), cfg, 0.0, None)
        torch.testing.assert_close(x, points([0.995, 0.0]), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("noise_scale", [0.0, 0.5, 1.0])
    def test_matches_reference_chain(self, seed, noise_scale):
        rng = Rng(seed)
        ebm = EbmModel.init(2, [8], rng, reference="standard-gaussian" if seed % 2 else "none")
        x0 = gaussian_sample(rng, 7, 2)
        cfg = LangevinConfig(n_steps=5 + seed % 4, step_size=0.05 + 0.01 * (seed % 3))
        ours = langevin_flow(ebm, x0, cfg, noise_scale, rng.clone())
        theirs = reference_chain(ebm, x0, cfg.step_size, cfg.n_steps, noise_scale, rng.clone())
        assert float((ours - theirs).abs().max()) < 1e-12

    def test_zero_steps_is_identity(self, rng):
        ebm = EbmModel.init(2, [4], rng)
        x0 = gaussian_sample(rng, 5, 2)
        assert torch.equal(langevin_flow(ebm, x0, LangevinConfig(n_steps=0), 1.0, rng), x0)

    def test_noise_off_consumes_no_randomness(self, rng):
        before = rng.get_state()
        langevin_flow(QuadraticEnergy(), points([1.0, 1.0]), LangevinConfig(n_steps=3), 0.0, rng)
        assert rng.get_state() == before

    def test_step_size_override(self):
        cfg = LangevinConfig(n_steps=1, step_size=1.0)
        x = langevin_flow(QuadraticEnergy(), points([1.0, 0.0]), cfg, 0.0, None, step_size=0.1)
        torch.testing.assert_close(x, points([0.995, 0.0]), rtol=0, atol=1e-15)

    def test_explosion_reports_step_and_chain(self):
        cfg = LangevinConfig(n_steps=10, step_size=1.0)
        with pytest.raises(DivergenceError) as info:
            langevin_flow(QuadraticEnergy(lam=-1e6), points([0.0, 0.0], [1.0, 1.0]), cfg, 0.0, None)
        assert info.value.step == 2
        assert info.value.chain == 1

    def test_nan_gradient(self):
        class NanEnergy(QuadraticEnergy):
            def grad_x(self, x, create_graph=False):
                return torch.full_like(x, float("nan"))

        with pytest.raises(DivergenceError) as info:
            langevin_flow(NanEnergy(), points([0.0, 0.0]), LangevinConfig(n_steps=3), 0.0, None)
        assert info.value.step == 1
        assert info.value.chain == 0

    def test_noise_requires_rng(self):
        with pytest.raises(ValueError):
            langevin_flow(QuadraticEnergy(), points([0.0, 0.0]), LangevinConfig(n_steps=1), 1.0, None)

    def test_noise_scale_range(self, rng):
        with pytest.raises(ValueError):
            langevin_flow(QuadraticEnergy(), points([0.0, 0.0]), LangevinConfig(n_steps=1), 1.5, rng)

    def test_split_run_equals_single_run(self, rng):
        ebm = EbmModel.init(2, [8], rng)
        x0 = gaussian_sample(rng, 16, 2)
        whole = langevin_flow(ebm, x0, LangevinConfig(n_steps=5, step_size=0.1), 1.0, Rng(7))
        stream = Rng(7)
        half = langevin_flow(ebm, x0, LangevinConfig(n_steps=2, step_size=0.1), 1.0, stream)
        split = langevin_flow(ebm, half, LangevinConfig(n_steps=3, step_size=0.1), 1.0, stream)
        assert torch.equal(whole, split)

    @pytest.mark.parametrize(
        "ebm, step_size",
        [(QuadraticEnergy(), 0.5), (EbmModel.init(2, [8], Rng(3)), 0.02)],
    )
    def test_noise_free_energy_never_decreases(self, ebm, step_size):
        x = gaussian_sample(Rng(4), 64, 2)
        cfg = LangevinConfig(n_steps=1, step_size=step_size)
        before = ebm.energy(x).detach()
        for _ in range(20):
            x = langevin_flow(ebm, x, cfg, 0.0, None)
            after = ebm.energy(x).detach()
            assert bool((after >= before - 1e-12).all())
            before = after

    def test_quadratic_mixes_to_stationary_gaussian(self, rng):
        # f = -‖x‖²/2 의 정상분포는 N(0, I); 작은 δ 에서 분산이 1 근처
        x0 = torch.zeros(4000, 2, dtype=DTYPE)
        x = langevin_flow(QuadraticEnergy(), x0, LangevinConfig(n_steps=400, step_size=0.1), 1.0, rng)
        assert abs(float(x.var()) - 1.0) < 0.1


class TestEbmGradient:
    def test_zero_when_batches_equal(self, rng):
        ebm = EbmModel.init(2, [8], rng)
        batch = gaussian_sample(rng, 10, 2)
        assert torch.equal(ebm_grad(ebm, batch, batch), torch.zeros(ebm.num_params, dtype=DTYPE))

    def test_linear_energy_is_mean_difference(self, rng):
        # f = w·x + b 이면 ∇_w f = x, ∇_b f = 1
        ebm = EbmModel(MlpNet.zeros([2, 1]).with_flat_params(torch.tensor([0.7, -0.2, 0.1], dtype=DTYPE)))
        data = gaussian_sample(rng, 30, 2) + 1.0
        synth = gaussian_sample(rng, 20, 2)
        expected = torch.cat([data.mean(dim=0) - synth.mean(dim=0), torch.zeros(1, dtype=DTYPE)])
        torch.testing.assert_close(ebm_grad(ebm, data, synth), expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        rng = Rng(seed)
        ebm = EbmModel.init(2, [6, 6], rng, reference="standard-gaussian")
        data = gaussian_sample(rng, 8, 2)
        synth = 0.5 * gaussian_sample(rng, 5, 2) + 0.3

        def objective(p):
            model = ebm.with_flat_params(p)
            return model.energy(data).mean() - model.energy(synth).mean()

        fd = finite_diff_grad(objective, ebm.flat_params())
        grad = ebm_grad(ebm, data, synth)
        assert float((grad - fd).abs().max()) / float(fd.abs().max()) < 1e-6

    def test_empty_batch(self, rng):
        ebm = EbmModel.init(2, [8], rng)
        with pytest.raises(ValueError):
            ebm_grad(ebm, torch.zeros(0, 2, dtype=DTYPE), gaussian_sample(rng, 3, 2))


class TestNoiseSchedule:
    @pytest.mark.parametrize("epoch, expected", [(0, 1.0), (15, 2.0 ** -20), (30, 0.0), (60, 0.0)])
    def test_decay_ratio(self, epoch, expected):
        assert noise_decay_ratio(epoch, 30) == expected

    def test_decay_is_non_increasing(self):
        values = [noise_decay_ratio(e, 10) for e in range(25)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            noise_decay_ratio(0, 0)
        with pytest.raises(ValueError):
            noise_decay_ratio(-1, 10)

    def test_training_noise_scale_modes(self):
        assert training_noise_scale(LangevinConfig(noise_mode="full"), 5) == 1.0
        assert training_noise_scale(LangevinConfig(noise_mode="off"), 5) == 0.0
        decay = LangevinConfig(noise_mode="decay", decay_epochs=10)
        assert training_noise_scale(decay, 5) == noise_decay_ratio(5, 10)


class TestShortRun:
    def test_uniform_initial_sample_in_bounds(self, rng):
        x = initial_sample("uniform", 500, 2, rng, (-1.5, 1.5))
        assert float(x.abs().max()) <= 1.5

    def test_unknown_init(self, rng):
        with pytest.raises(ValueError):
            initial_sample("laplace", 5, 2, rng)

    def test_shortrun_sample_shape(self, rng):
        x = shortrun_sample(QuadraticEnergy(), LangevinConfig(n_steps=3), "gaussian", 9, rng)
        assert x.shape == (9, 2)

    def test_shortrun_rejects_zero_samples(self, rng):
        with pytest.raises(ValueError):
            shortrun_sample(QuadraticEnergy(), LangevinConfig(n_steps=3), "uniform", 0, rng)
