"""
EBM f_θ 와 T-스텝 Langevin flow

x_t = x_{t-1} + (δ²/2) ∇_x f_θ(x_{t-1}) + δ · noise_scale · ε_t
"""
import logging
from dataclasses import dataclass, replace
from typing import Literal, Optional, Protocol, Tuple

import torch

from core.exceptions import DivergenceError
from core.rng import Rng, gaussian_sample, uniform_sample
from core.tensor import DTYPE, check_batch, first_bad_row
from services.diffnet import MlpNet, mlp_apply, mlp_backward
from storage.schemas import LangevinConfig

logger = logging.getLogger(__name__)

# 체인 중간에 좌표가 이 값을 넘으면 발산으로 간주 (clamp하지 않음)
EXPLOSION_LIMIT = 1e6


class EnergyModel(Protocol):
    """langevin_flow가 요구하는 인터페이스 (테스트용 해석적 energy도 이를 따름)"""

    dim: int

    def energy(self, x: torch.Tensor) -> torch.Tensor: ...

    def grad_x(self, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor: ...


@dataclass(frozen=True)
class EbmModel:
    """
    음의 energy f_θ (스칼라 출력 MLP) + 선택적 표준정규 reference

    reference = standard-gaussian 이면 log 비정규화 밀도는 f_θ(x) - ‖x‖²/2
    """

    net: MlpNet
    reference: Literal["none", "standard-gaussian"] = "none"

    def __post_init__(self):
        if self.net.d_out != 1:
            raise ValueError(f"EBM 네트워크 출력은 스칼라여야 합니다. (d_out={self.net.d_out})")
        if self.reference not in ("none", "standard-gaussian"):
            raise ValueError(f"지원하지 않는 reference: {self.reference}")

    @property
    def dim(self) -> int:
        return self.net.d_in

    @property
    def num_params(self) -> int:
        return self.net.num_params

    def flat_params(self) -> torch.Tensor:
        return self.net.flat_params()

    def with_flat_params(self, vec: torch.Tensor) -> "EbmModel":
        return replace(self, net=self.net.with_flat_params(vec))

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        out = mlp_apply(self.net, x)[:, 0]
        if self.reference == "standard-gaussian":
            out = out - 0.5 * (x * x).sum(dim=1)
        return out

    def grad_x(self, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        """
        ∇_x energy

        Args:
            create_graph: True면 결과를 다시 미분할 수 있도록 그래프 유지 (unrolled 역전파용)
        """
        if create_graph:
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            with torch.enable_grad():
                (g,) = torch.autograd.grad(self.energy(x).sum(), x, create_graph=True)
            return g
        upstream = torch.ones(x.shape[0], 1, dtype=DTYPE)
        g, _ = mlp_backward(self.net, x, upstream, need_params=False)
        if self.reference == "standard-gaussian":
            g = g - x
        return g

    @classmethod
    def init(cls, dim: int, hidden, rng: Rng, activation: str = "swish", reference: str = "none") -> "EbmModel":
        return cls(MlpNet.init([dim, *hidden, 1], rng, activation), reference)


def energy(ebm: EbmModel, x: torch.Tensor) -> torch.Tensor:
    """
    f_θ(x) (reference가 있으면 -‖x‖²/2 포함)

    Returns:
        [n]
    """
    check_batch(x, ebm.dim, "x")
    return ebm.energy(x)


def _diverged(message: str, step: int, chain: int) -> DivergenceError:
    logger.error(f"❌ [SAMPLE] {message}")
    return DivergenceError(message, step=step, chain=chain)


def langevin_flow(
    ebm: EnergyModel,
    x0: torch.Tensor,
    cfg: LangevinConfig,
    noise_scale: float,
    rng: Optional[Rng],
    step_size: Optional[float] = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """
    T-스텝 Langevin flow

    Args:
        ebm: energy 모델
        x0: 초기 체인 [n, D]
        cfg: Langevin 설정 (T = cfg.n_steps)
        noise_scale: 노이즈 배율 [0, 1] (0이면 난수를 소비하지 않음)
        rng: 노이즈용 난수 생성기 (noise_scale = 0 이면 None 가능)
        step_size: δ 덮어쓰기 (테스트 시 δ · test_step_ratio)
        create_graph: x0에 대해 미분 가능한 체인 (노이즈 없는 결정적 생성기용)

    Raises:
        DivergenceError: gradient가 유한하지 않거나 좌표가 1e6을 넘는 경우
    """
    check_batch(x0, ebm.dim, "x0")
    if not 0.0 <= noise_scale <= 1.0:
        raise ValueError(f"noise_scale은 [0, 1] 범위여야 합니다. ({noise_scale})")
    if noise_scale > 0 and rng is None:
        raise ValueError("noise_scale > 0 이면 rng가 필요합니다.")

    delta = cfg.step_size if step_size is None else step_size
    drift = 0.5 * delta * delta
    x = x0
    n, d = x0.shape
    for t in range(1, cfg.n_steps + 1):
        g = ebm.grad_x(x, create_graph=create_graph)
        bad = first_bad_row(g.detach())
        if bad is not None:
            raise _diverged(f"Langevin gradient가 유한하지 않습니다. (step={t}, chain={bad})", t, bad)
        x = x + drift * g
        if noise_scale > 0:
            x = x + (delta * noise_scale) * gaussian_sample(rng, n, d)
        bad = first_bad_row(x.detach(), EXPLOSION_LIMIT)
        if bad is not None:
            raise _diverged(f"Langevin 체인이 발산했습니다. (step={t}, chain={bad}, |x| > {EXPLOSION_LIMIT:g})", t, bad)
    return x


def ebm_grad_parts(ebm: EbmModel, batch: torch.Tensor) -> torch.Tensor:
    """(1/n) Σ ∇_θ f_θ(x_i)  (reference 항은 θ와 무관하므로 기여 없음)"""
    check_batch(batch, ebm.dim, "batch")
    if batch.shape[0] < 1:
        raise ValueError("빈 배치입니다.")
    upstream = torch.full((batch.shape[0], 1), 1.0 / batch.shape[0], dtype=DTYPE)
    _, grad = mlp_backward(ebm.net, batch, upstream)
    return grad


def ebm_grad(ebm: EbmModel, data_batch: torch.Tensor, synth_batch: torch.Tensor) -> torch.Tensor:
    """
    EBM 최대우도 학습 gradient (ascent 방향)

    (1/n) Σ ∇_θ f(x_i) - (1/m) Σ ∇_θ f(x̃_i)
    """
    return ebm_grad_parts(ebm, data_batch) - ebm_grad_parts(ebm, synth_batch)


def noise_decay_ratio(epoch: int, decay_epochs: int) -> float:
    """
    노이즈 감쇠 비율 max(1 - epoch/K, 0) ** 20

    밑을 먼저 0으로 자르므로 epoch >= K 이후에는 계속 0.
    """
    if epoch < 0 or decay_epochs < 1:
        raise ValueError(f"epoch >= 0, K >= 1 이어야 합니다. (epoch={epoch}, K={decay_epochs})")
    return max(1.0 - epoch / decay_epochs, 0.0) ** 20


def training_noise_scale(cfg: LangevinConfig, epoch: int) -> float:
    """학습 중 noise_scale (full=1, off=0, decay=감쇠 비율)"""
    if cfg.noise_mode == "full":
        return 1.0
    if cfg.noise_mode == "decay":
        return noise_decay_ratio(epoch, cfg.decay_epochs)
    return 0.0


def initial_sample(
    init: Literal["uniform", "gaussian"],
    n: int,
    dim: int,
    rng: Rng,
    bounds: Tuple[float, float] = (-1.5, 1.5),
) -> torch.Tensor:
    """short-run 체인의 초기 분포 p_0 샘플"""
    if init == "uniform":
        return uniform_sample(rng, n, dim, bounds[0], bounds[1])
    if init == "gaussian":
        return gaussian_sample(rng, n, dim)
    raise ValueError(f"지원하지 않는 초기 분포: {init}")


def shortrun_sample(
    ebm: EnergyModel,
    cfg: LangevinConfig,
    init: Literal["uniform", "gaussian"],
    n: int,
    rng: Rng,
    bounds: Tuple[float, float] = (-1.5, 1.5),
    noise_scale: float = 1.0,
) -> torch.Tensor:
    """
    short-run EBM baseline 생성기: x0 ~ p_0 후 Langevin flow

    Args:
        init: uniform[bounds] 또는 gaussian
        n: 샘플 수 (>= 1)
    """
    if n < 1:
        raise ValueError("n >= 1 이어야 합니다.")
    x0 = initial_sample(init, n, ebm.dim, rng, bounds)
    return langevin_flow(ebm, x0, cfg, noise_scale, rng)
