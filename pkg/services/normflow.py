"""
Affine coupling normalizing flow

x = g_α(z), z ~ N(0, I_D). 각 coupling 레이어는 mask=1 좌표를 그대로 통과시키고
mask=0 좌표를 h * exp(s) + t 로 변환함.
s = clamp * tanh(scale_net(h ⊙ mask) / clamp), t = shift_net(h ⊙ mask)

파라미터 flatten 순서: 레이어 순서대로, 각 레이어는 scale_net 다음 shift_net.
"""
import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import torch

from core.exceptions import ShapeError
from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE, check_batch, check_finite
from services.diffnet import AdamState, MlpNet, adam_step, mlp_apply

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CouplingLayer:
    mask: torch.Tensor
    scale_net: MlpNet
    shift_net: MlpNet
    scale_clamp: float = 2.0

    def __post_init__(self):
        ones = int(self.mask.sum())
        if ones == 0 or ones == self.mask.numel():
            raise ValueError("mask에는 0과 1이 각각 하나 이상 있어야 합니다.")
        if self.scale_clamp <= 0:
            raise ValueError("scale_clamp는 양수여야 합니다.")
        k = self.mask.numel() - ones
        for net in (self.scale_net, self.shift_net):
            if net.d_in != self.mask.numel() or net.d_out != k:
                raise ShapeError(f"subnet shape 불일치: {net.sizes} (D={self.mask.numel()}, 변환 좌표 {k}개)")

    @property
    def dim(self) -> int:
        return self.mask.numel()

    def _select(self) -> torch.Tensor:
        # [k, D] 선택 행렬: 변환 좌표에 s, t를 흩뿌림
        idx = torch.nonzero(self.mask == 0).flatten()
        return torch.eye(self.dim, dtype=DTYPE)[idx]

    def scale_shift(self, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(s, t) 각각 [n, k]"""
        hm = h * self.mask
        c = self.scale_clamp
        s = c * torch.tanh(mlp_apply(self.scale_net, hm) / c)
        t = mlp_apply(self.shift_net, hm)
        return s, t

    def tensors(self) -> List[torch.Tensor]:
        return self.scale_net.tensors() + self.shift_net.tensors()


def coupling_forward(layer: CouplingLayer, h: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    coupling 정방향 변환

    Returns:
        (h' [n, D], logdet [n])
    """
    check_batch(h, layer.dim, "h")
    s, t = layer.scale_shift(h)
    sel = layer._select()
    out = h * torch.exp(s @ sel) + t @ sel
    return out, s.sum(dim=1)


def coupling_inverse(layer: CouplingLayer, h_out: torch.Tensor) -> torch.Tensor:
    """coupling 역변환: h_j = (h'_j - t_j) * exp(-s_j)"""
    check_batch(h_out, layer.dim, "h'")
    # 통과 좌표는 그대로이므로 h' 로 s, t 를 다시 계산할 수 있음
    s, t = layer.scale_shift(h_out)
    sel = layer._select()
    return (h_out - t @ sel) * torch.exp(-(s @ sel))


@dataclass(frozen=True)
class FlowModel:
    """coupling 레이어 스택 + 표준정규 prior"""

    dim: int
    layers: Tuple[CouplingLayer, ...]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if not torch.equal(a.mask + b.mask, torch.ones(self.dim, dtype=DTYPE)):
                raise ValueError("연속한 coupling 레이어의 mask는 서로 보완이어야 합니다.")
        for layer in self.layers:
            if layer.dim != self.dim:
                raise ShapeError(f"레이어 차원 불일치: {layer.dim} vs {self.dim}")

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def tensors(self) -> List[torch.Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.tensors())
        return out

    def flat_params(self) -> torch.Tensor:
        tensors = self.tensors()
        if not tensors:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([t.detach().reshape(-1) for t in tensors])

    def with_tensors(self, tensors: Sequence[torch.Tensor]) -> "FlowModel":
        layers, offset = [], 0
        for layer in self.layers:
            n_scale = len(layer.scale_net.tensors())
            n_shift = len(layer.shift_net.tensors())
            scale_net = layer.scale_net.with_tensors(tensors[offset:offset + n_scale])
            offset += n_scale
            shift_net = layer.shift_net.with_tensors(tensors[offset:offset + n_shift])
            offset += n_shift
            layers.append(replace(layer, scale_net=scale_net, shift_net=shift_net))
        return replace(self, layers=tuple(layers))

    def with_flat_params(self, vec: torch.Tensor) -> "FlowModel":
        if vec.numel() != self.num_params:
            raise ShapeError(f"파라미터 길이 불일치: {vec.numel()} vs {self.num_params}")
        tensors, offset = [], 0
        for t in self.tensors():
            tensors.append(vec[offset:offset + t.numel()].reshape(t.shape).clone())
            offset += t.numel()
        return self.with_tensors(tensors)

    @classmethod
    def init(
        cls,
        dim: int,
        depth: int,
        hidden: Sequence[int],
        rng: Rng,
        scale_clamp: float = 2.0,
        activation: str = "tanh",
        identity: bool = True,
    ) -> "FlowModel":
        """
        mask가 번갈아 바뀌는 flow 생성

        Args:
            identity: True면 subnet 출력층을 0으로 두어 항등 변환에서 시작
        """
        if dim < 2:
            raise ValueError("coupling flow는 D >= 2 가 필요합니다.")
        layers = []
        for l in range(depth):
            mask = torch.tensor([1.0 if i % 2 == l % 2 else 0.0 for i in range(dim)], dtype=DTYPE)
            k = dim - int(mask.sum())
            sizes = [dim, *hidden, k]
            scale_net = MlpNet.init(sizes, rng, activation, zero_last=identity)
            shift_net = MlpNet.init(sizes, rng, activation, zero_last=identity)
            layers.append(CouplingLayer(mask, scale_net, shift_net, scale_clamp))
        return cls(dim, tuple(layers))


def flow_forward(model: FlowModel, z: torch.Tensor) -> torch.Tensor:
    """x = g_α(z)"""
    check_batch(z, model.dim, "z")
    h = z
    for layer in model.layers:
        h, _ = coupling_forward(layer, h)
    return h


def flow_inverse(model: FlowModel, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    z = g_α^{-1}(x) 와 역변환 log|det|

    Returns:
        (z [n, D], logdet_inv [n]) ; logdet_inv = -Σ_l logdet_l (각 중간값에서 평가)
    """
    check_batch(x, model.dim, "x")
    h = x
    logdet = torch.zeros(x.shape[0], dtype=DTYPE)
    for layer in reversed(model.layers):
        s, t = layer.scale_shift(h)
        sel = layer._select()
        h = (h - t @ sel) * torch.exp(-(s @ sel))
        logdet = logdet - s.sum(dim=1)
    return h, logdet


def prior_logprob(z: torch.Tensor) -> torch.Tensor:
    """log N(z; 0, I_D)"""
    d = z.shape[1]
    return -0.5 * d * LOG_2PI - 0.5 * (z * z).sum(dim=1)


def flow_logprob(model: FlowModel, x: torch.Tensor) -> torch.Tensor:
    """log q_α(x) = log q_0(g^{-1}(x)) + log|det ∂g^{-1}/∂x|"""
    z, logdet = flow_inverse(model, x)
    return prior_logprob(z) + logdet


def flow_sample(model: FlowModel, n: int, rng: Rng) -> Tuple[torch.Tensor, torch.Tensor]:
    """(z, x̂ = g_α(z)), z ~ q_0"""
    z = gaussian_sample(rng, n, model.dim)
    return z, flow_forward(model, z)


def flow_param_grad(model: FlowModel, batch: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """
    (1/m) Σ log q_α(x_i) 와 파라미터에 대한 gradient

    batch는 상수로 취급 (Langevin 쪽으로 gradient가 흐르지 않음).

    Returns:
        (평균 log-likelihood, flat gradient)
    """
    check_batch(batch, model.dim, "batch")
    if batch.shape[0] < 1:
        raise ValueError("빈 배치로는 flow를 학습할 수 없습니다.")
    leaves = [t.detach().clone().requires_grad_(True) for t in model.tensors()]
    graph_model = model.with_tensors(leaves)
    with torch.enable_grad():
        mean_logprob = flow_logprob(graph_model, batch.detach()).mean()
        grads = torch.autograd.grad(mean_logprob, leaves, allow_unused=True)
    flat = torch.cat([
        (g if g is not None else torch.zeros_like(t)).reshape(-1)
        for g, t in zip(grads, leaves)
    ])
    return float(mean_logprob.detach()), flat


def flow_mle_step(model: FlowModel, batch: torch.Tensor, opt: AdamState) -> Tuple[FlowModel, AdamState, float]:
    """
    평균 log-likelihood에 대한 Adam ascent 한 스텝

    Returns:
        (갱신된 모델, 갱신된 Adam 상태, 갱신 전 평균 log q_α(batch))
    """
    mean_logprob, grad = flow_param_grad(model, batch)
    check_finite(grad, "flow gradient")
    params, opt = adam_step(model.flat_params(), -grad, opt)
    return model.with_flat_params(params), opt, mean_logprob
