import pytest
import torch

from core.exceptions import ShapeError
from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE
from services.diffnet import AdamState, MlpNet, adam_step, finite_diff_grad, mlp_backward, mlp_forward


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max()) / max(float(b.abs().max()), 1e-12)


class TestMlpNet:
    def test_param_count_and_flat_round_trip(self, rng):
        net = MlpNet.init([2, 4, 3], rng)
        assert net.num_params == 2 * 4 + 4 + 4 * 3 + 3
        again = net.with_flat_params(net.flat_params())
        assert torch.equal(again.flat_params(), net.flat_params())

    def test_zero_net_outputs_zero(self):
        net = MlpNet.zeros([2, 5, 1])
        out = mlp_forward(net, torch.randn(4, 2, dtype=DTYPE))
        assert torch.equal(out, torch.zeros(4, 1, dtype=DTYPE))

    def test_zero_last_layer(self, rng):
        net = MlpNet.init([2, 5, 2], rng, zero_last=True)
        assert torch.equal(mlp_forward(net, gaussian_sample(rng, 3, 2)), torch.zeros(3, 2, dtype=DTYPE))

    def test_rejects_wrong_width(self, rng):
        net = MlpNet.init([2, 3, 1], rng)
        with pytest.raises(ShapeError):
            mlp_forward(net, torch.zeros(4, 3, dtype=DTYPE))

    def test_rejects_unknown_activation(self, rng):
        with pytest.raises(ValueError):
            MlpNet.init([2, 1], rng, activation="relu")

    def test_rejects_wrong_param_length(self, rng):
        net = MlpNet.init([2, 3, 1], rng)
        with pytest.raises(ShapeError):
            net.with_flat_params(torch.zeros(net.num_params + 1, dtype=DTYPE))


class TestMlpBackward:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("activation", ["swish", "tanh"])
    def test_matches_finite_differences(self, seed, activation):
        rng = Rng(seed)
        net = MlpNet.init([2, 5, 4, 2], rng, activation)
        x = gaussian_sample(rng, 3, 2)
        upstream = gaussian_sample(rng, 3, 2)

        grad_x, grad_params = mlp_backward(net, x, upstream)

        fd_x = finite_diff_grad(lambda v: (upstream * mlp_forward(net, v)).sum(), x)
        fd_params = finite_diff_grad(
            lambda p: (upstream * mlp_forward(net.with_flat_params(p), x)).sum(),
            net.flat_params(),
        )
        assert rel_error(grad_x, fd_x) < 1e-5
        assert rel_error(grad_params, fd_params) < 1e-5

    def test_input_only(self, rng):
        net = MlpNet.init([2, 4, 1], rng)
        x = gaussian_sample(rng, 6, 2)
        upstream = torch.ones(6, 1, dtype=DTYPE)
        grad_x, grad_params = mlp_backward(net, x, upstream, need_params=False)
        full_x, _ = mlp_backward(net, x, upstream)
        assert grad_params is None
        assert torch.equal(grad_x, full_x)

    def test_batch_additive(self, rng):
        net = MlpNet.init([2, 16, 16, 1], rng)
        x = gaussian_sample(rng, 12, 2)
        upstream = gaussian_sample(rng, 12, 1)
        full_x, full_params = mlp_backward(net, x, upstream)
        head_x, head_params = mlp_backward(net, x[:5], upstream[:5])
        tail_x, tail_params = mlp_backward(net, x[5:], upstream[5:])
        torch.testing.assert_close(full_params, head_params + tail_params, rtol=0, atol=1e-10)
        torch.testing.assert_close(full_x, torch.cat([head_x, tail_x]), rtol=0, atol=1e-10)

    def test_batch_mismatch(self, rng):
        net = MlpNet.init([2, 4, 1], rng)
        with pytest.raises(ShapeError):
            mlp_backward(net, torch.zeros(3, 2, dtype=DTYPE), torch.zeros(2, 1, dtype=DTYPE))


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        params = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
        grads = torch.tensor([0.5, -3.0, 2.0], dtype=DTYPE)
        state = AdamState.zeros(3, lr=0.1)
        new, _ = adam_step(params, grads, state)
        torch.testing.assert_close(new, params - 0.1 * torch.sign(grads), rtol=1e-6, atol=1e-8)

    def test_does_not_mutate_state(self):
        state = AdamState.zeros(2, lr=0.1)
        _, after = adam_step(torch.zeros(2, dtype=DTYPE), torch.ones(2, dtype=DTYPE), state)
        assert state.step == 0
        assert torch.equal(state.m, torch.zeros(2, dtype=DTYPE))
        assert after.step == 1

    def test_bias_correction_second_step(self):
        b1, b2, eps, lr = 0.5, 0.5, 1e-8, 0.01
        g1 = torch.tensor([1.0], dtype=DTYPE)
        g2 = torch.tensor([3.0], dtype=DTYPE)
        state = AdamState.zeros(1, lr=lr, beta1=b1, beta2=b2, eps=eps)
        p1, state = adam_step(torch.zeros(1, dtype=DTYPE), g1, state)
        p2, state = adam_step(p1, g2, state)
        m = b1 * (1 - b1) * g1 + (1 - b1) * g2
        v = b2 * (1 - b2) * g1 ** 2 + (1 - b2) * g2 ** 2
        expected = p1 - lr * (m / (1 - b1 ** 2)) / (torch.sqrt(v / (1 - b2 ** 2)) + eps)
        torch.testing.assert_close(p2, expected, rtol=0, atol=1e-15)
        assert state.step == 2

    def test_zero_lr_keeps_params(self):
        params = torch.tensor([1.0, 2.0], dtype=DTYPE)
        new, _ = adam_step(params, torch.tensor([5.0, -1.0], dtype=DTYPE), AdamState.zeros(2, lr=0.0))
        assert torch.equal(new, params)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(torch.zeros(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), AdamState.zeros(2, lr=0.1))

    @pytest.mark.parametrize("beta1", [-0.1, 1.0])
    def test_invalid_beta(self, beta1):
        with pytest.raises(ValueError):
            AdamState.zeros(2, lr=0.1, beta1=beta1)
