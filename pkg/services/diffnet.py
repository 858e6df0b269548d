"""
작은 미분 가능 MLP

- mlp_forward / mlp_backward: 입력/파라미터 양쪽에 대한 정확한 역전파 gradient
- adam_step: bias correction 포함 Adam
- finite_diff_grad: 중앙 차분 gradient (gradient 검증용 오라클)

파라미터 flatten 순서: 레이어 순서대로, 각 레이어는 weight(row-major) 다음 bias.
"""
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from core.exceptions import ShapeError
from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE, as_tensor, check_batch, check_same_shape

ACTIVATIONS = ("swish", "tanh")


def _activate(h: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "swish":
        return h * torch.sigmoid(h)
    return torch.tanh(h)


@dataclass(frozen=True)
class MlpNet:
    """
    다층 퍼셉트론 (은닉층 activation, 출력층 linear)

    weights[l]: [sizes[l+1], sizes[l]], biases[l]: [sizes[l+1]]
    """

    sizes: Tuple[int, ...]
    weights: Tuple[torch.Tensor, ...]
    biases: Tuple[torch.Tensor, ...]
    activation: str = "swish"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"지원하지 않는 activation: {self.activation}")
        if len(self.sizes) < 2 or len(self.weights) != len(self.sizes) - 1:
            raise ShapeError(f"레이어 구성이 올바르지 않습니다: {self.sizes}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tuple(w.shape) != (self.sizes[l + 1], self.sizes[l]) or tuple(b.shape) != (self.sizes[l + 1],):
                raise ShapeError(f"{l}번째 레이어 파라미터 shape 불일치")

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(w.numel() + b.numel() for w, b in zip(self.weights, self.biases))

    def tensors(self) -> List[torch.Tensor]:
        """flatten 순서대로 나열한 파라미터 텐서 목록"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def flat_params(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors()])

    def with_flat_params(self, vec: torch.Tensor) -> "MlpNet":
        if vec.numel() != self.num_params:
            raise ShapeError(f"파라미터 길이 불일치: {vec.numel()} vs {self.num_params}")
        weights, biases, offset = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[offset:offset + w.numel()].reshape(w.shape).clone())
            offset += w.numel()
            biases.append(vec[offset:offset + b.numel()].reshape(b.shape).clone())
            offset += b.numel()
        return replace(self, weights=tuple(weights), biases=tuple(biases))

    def with_tensors(self, tensors: Sequence[torch.Tensor]) -> "MlpNet":
        """tensors() 순서의 텐서로 교체 (autograd leaf 주입용)"""
        return replace(self, weights=tuple(tensors[0::2]), biases=tuple(tensors[1::2]))

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: Rng,
        activation: str = "swish",
        zero_last: bool = False,
    ) -> "MlpNet":
        """
        weight ~ N(0, 1/fan_in), bias = 0 으로 초기화

        Args:
            zero_last: 출력층 weight를 0으로 (coupling 레이어를 항등 변환으로 시작할 때)
        """
        sizes = tuple(int(s) for s in sizes)
        weights, biases = [], []
        for l in range(len(sizes) - 1):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            w = gaussian_sample(rng, fan_out, fan_in) * (1.0 / fan_in) ** 0.5
            if zero_last and l == len(sizes) - 2:
                w = torch.zeros_like(w)
            weights.append(w)
            biases.append(torch.zeros(fan_out, dtype=DTYPE))
        return cls(sizes, tuple(weights), tuple(biases), activation)

    @classmethod
    def zeros(cls, sizes: Sequence[int], activation: str = "swish") -> "MlpNet":
        sizes = tuple(int(s) for s in sizes)
        weights = tuple(torch.zeros(sizes[l + 1], sizes[l], dtype=DTYPE) for l in range(len(sizes) - 1))
        biases = tuple(torch.zeros(sizes[l + 1], dtype=DTYPE) for l in range(len(sizes) - 1))
        return cls(sizes, weights, biases, activation)


def mlp_apply(net: MlpNet, x: torch.Tensor) -> torch.Tensor:
    """검사 없는 forward (autograd 그래프 유지)"""
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = _activate(h, net.activation)
    return h


def mlp_forward(net: MlpNet, x: torch.Tensor) -> torch.Tensor:
    """
    배치 forward

    Args:
        net: MLP
        x: [n, d_in]

    Returns:
        [n, d_out]
    """
    check_batch(x, net.d_in, "x")
    return mlp_apply(net, x)


def mlp_backward(
    net: MlpNet,
    x: torch.Tensor,
    upstream: torch.Tensor,
    need_params: bool = True,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    sum_n <upstream_n, output_n> 의 역전파 gradient

    Args:
        net: MLP
        x: [n, d_in]
        upstream: [n, d_out]
        need_params: False면 입력 gradient만 계산 (Langevin 스텝용)

    Returns:
        (grad_x [n, d_in], grad_params 배치 합산 flat 벡터 또는 None)
    """
    check_batch(x, net.d_in, "x")
    check_batch(upstream, net.d_out, "upstream")
    if upstream.shape[0] != x.shape[0]:
        raise ShapeError(f"배치 크기 불일치: {x.shape[0]} vs {upstream.shape[0]}")

    x_leaf = x.detach().clone().requires_grad_(True)
    if need_params:
        leaves = [t.detach().clone().requires_grad_(True) for t in net.tensors()]
        graph_net = net.with_tensors(leaves)
    else:
        leaves = []
        graph_net = net

    with torch.enable_grad():
        out = mlp_apply(graph_net, x_leaf)
        grads = torch.autograd.grad(out, [x_leaf, *leaves], grad_outputs=upstream, allow_unused=True)

    grad_x = grads[0] if grads[0] is not None else torch.zeros_like(x)
    if not need_params:
        return grad_x, None
    flat = [
        (g if g is not None else torch.zeros_like(t)).reshape(-1)
        for g, t in zip(grads[1:], leaves)
    ]
    return grad_x, torch.cat(flat)


@dataclass
class AdamState:
    """Adam 모멘트 상태 (모멘트는 0으로 시작)"""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"0 <= beta1, beta2 < 1 이어야 합니다. ({self.beta1}, {self.beta2})")
        if self.step < 0:
            raise ValueError("step-count는 0 이상이어야 합니다.")

    @classmethod
    def zeros(cls, num_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=torch.zeros(num_params, dtype=DTYPE),
            v=torch.zeros(num_params, dtype=DTYPE),
            step=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            lr=lr,
        )


def adam_step(params: torch.Tensor, grads: torch.Tensor, state: AdamState) -> Tuple[torch.Tensor, AdamState]:
    """
    Adam 한 스텝 (descent 방향: params - lr * m_hat / (sqrt(v_hat) + eps))

    ascent가 필요한 쪽은 -gradient를 넘김. 입력 state는 변경하지 않음.
    """
    check_same_shape(params, grads, "params/grads")
    if state.m.numel() != params.numel():
        raise ShapeError(f"Adam 상태 길이 불일치: {state.m.numel()} vs {params.numel()}")

    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


def finite_diff_grad(f: Callable[[torch.Tensor], float], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """
    중앙 차분 gradient: (f(x + h e_i) - f(x - h e_i)) / 2h

    Args:
        f: 스칼라 함수
        x: 평가 지점 (임의 shape)
        h: 차분 간격 (> 0)
    """
    if h <= 0:
        raise ValueError("h는 양수여야 합니다.")
    base = as_tensor(x).reshape(-1)
    grad = torch.zeros_like(base)
    for i in range(base.numel()):
        plus = base.clone()
        minus = base.clone()
        plus[i] += h
        minus[i] -= h
        grad[i] = (float(f(plus.reshape(x.shape))) - float(f(minus.reshape(x.shape)))) / (2.0 * h)
    return grad.reshape(x.shape)
