"""
학습된 CoopFlow를 잠재변수 생성기 x = F_θ(g_α(z), e=0) 로 쓰는 후속 작업
(복원, inpainting, 잠재공간 보간)

F_θ 는 노이즈 없는 T-스텝 Langevin 사상이며 x̂ 에 대해 unrolled 역전파로 미분함.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from core.rng import Rng, gaussian_sample
from core.tensor import DTYPE, as_tensor, check_batch
from services.coopflow import CoopState
from services.langevin_flow import langevin_flow
from services.normflow import flow_forward, flow_inverse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconResult:
    """
    복원 결과
    - x_hat_star: 최적 flow 출력 x̂*
    - x_recon: F_θ(x̂*, 0)
    - z_star: g_α^{-1}(x̂*)
    - loss_trajectory: iteration 0 부터의 손실 (길이 iterations_run + 1)
    """

    x_hat_star: torch.Tensor
    x_recon: torch.Tensor
    z_star: torch.Tensor
    loss_trajectory: List[float]
    iterations_run: int


def deterministic_generator(state: CoopState, x_hat: torch.Tensor) -> torch.Tensor:
    """
    F_θ(x̂, e=0): 테스트 스텝 크기, 노이즈 0 의 Langevin flow (x̂ 에 대해 미분 가능)
    """
    check_batch(x_hat, state.dim, "x_hat")
    lcfg = state.config.langevin
    return langevin_flow(
        state.ebm,
        x_hat,
        lcfg,
        0.0,
        None,
        step_size=lcfg.step_size * lcfg.test_step_ratio,
        create_graph=True,
    )


def _descend(
    init: torch.Tensor,
    generate: Callable[[torch.Tensor], torch.Tensor],
    target: torch.Tensor,
    weight: torch.Tensor,
    steps: int,
    lr: float,
    backtracking: bool,
) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor], List[torch.Tensor]]:
    """
    행별 손실 ‖weight ⊙ (target - generate(u))‖² 에 대한 gradient descent

    backtracking이면 손실이 늘어나는 행은 스텝을 버리고 그 행의 lr을 절반으로 줄임.

    Returns:
        (최종 u, 최종 출력, iteration별 행 손실 목록, iteration별 출력 목록)
    """
    if steps < 0:
        raise ValueError(f"steps >= 0 이어야 합니다. ({steps})")
    if lr <= 0:
        raise ValueError(f"lr > 0 이어야 합니다. ({lr})")

    def evaluate(u: torch.Tensor):
        leaf = u.detach().requires_grad_(True)
        with torch.enable_grad():
            out = generate(leaf)
            per_row = ((weight * (target - out)) ** 2).sum(dim=1)
            (grad,) = torch.autograd.grad(per_row.sum(), leaf)
        return per_row.detach(), grad.detach(), out.detach()

    u = init.detach()
    loss, grad, out = evaluate(u)
    lrs = torch.full((u.shape[0], 1), float(lr), dtype=DTYPE)
    losses, outputs = [loss], [out]
    for _ in range(steps):
        cand = u - lrs * grad
        c_loss, c_grad, c_out = evaluate(cand)
        if backtracking:
            accept = (c_loss <= loss)[:, None]
            u = torch.where(accept, cand, u)
            grad = torch.where(accept, c_grad, grad)
            out = torch.where(accept, c_out, out)
            loss = torch.where(accept[:, 0], c_loss, loss)
            lrs = torch.where(accept, lrs, 0.5 * lrs)
        else:
            u, loss, grad, out = cand, c_loss, c_grad, c_out
        losses.append(loss)
        outputs.append(out)
    return u, out, losses, outputs


def _results(state: CoopState, x_hat: torch.Tensor, out: torch.Tensor, losses, steps: int, z=None) -> List[ReconResult]:
    with torch.no_grad():
        z_star = flow_inverse(state.flow, x_hat)[0] if z is None else z
    trajectory = torch.stack(losses, dim=1)
    return [
        ReconResult(x_hat[i], out[i], z_star[i], trajectory[i].tolist(), steps)
        for i in range(x_hat.shape[0])
    ]


def reconstruct_batch(
    state: CoopState,
    x: torch.Tensor,
    steps: int = 200,
    lr: float = 0.05,
    rng: Optional[Rng] = None,
    backtracking: bool = False,
) -> List[ReconResult]:
    """
    여러 관측점을 한 번에 복원 (행마다 독립, x̂_0 = g_α(z), z ~ q_0)

    Raises:
        ValueError: steps < 0 또는 lr <= 0
        DivergenceError: unrolled 체인 발산
    """
    check_batch(x, state.dim, "x")
    rng = rng or Rng(state.config.seed)
    z0 = gaussian_sample(rng, x.shape[0], state.dim)
    with torch.no_grad():
        x_hat0 = flow_forward(state.flow, z0)
    weight = torch.ones_like(x)
    x_hat, out, losses, _ = _descend(
        x_hat0, lambda u: deterministic_generator(state, u), x, weight, steps, lr, backtracking
    )
    logger.info(f"[TASK] 복원 완료 - points: {x.shape[0]}, steps: {steps}, mean_loss: {float(losses[-1].mean()):.6f}")
    return _results(state, x_hat, out, losses, steps)


def reconstruct(
    state: CoopState,
    x: torch.Tensor,
    steps: int = 200,
    lr: float = 0.05,
    rng: Optional[Rng] = None,
    backtracking: bool = False,
) -> ReconResult:
    """
    L(x̂) = ‖x - F_θ(x̂, 0)‖² 를 x̂ 에 대해 gradient descent, z* = g_α^{-1}(x̂*)

    Args:
        state: 학습 상태
        x: 복원할 점 [D]
        steps: descent 횟수 (0이면 초기값 결과)
        lr: 고정 학습률
        rng: x̂_0 초기화용 난수
        backtracking: 손실 증가 시 lr 절반 후 스텝 거부

    Returns:
        ReconResult
    """
    x = as_tensor(x, (state.dim,))
    return reconstruct_batch(state, x[None, :], steps, lr, rng, backtracking)[0]


def reconstruct_latent(
    state: CoopState,
    x: torch.Tensor,
    steps: int = 200,
    lr: float = 0.05,
    rng: Optional[Rng] = None,
    backtracking: bool = False,
) -> List[ReconResult]:
    """
    z 를 직접 최적화하는 복원: L(z) = ‖x - F_θ(g_α(z), 0)‖²

    x는 [D] 또는 [n, D]. z_0 는 reconstruct_batch 와 같은 방식으로 추출하므로
    같은 rng 상태에서 두 방법의 시작점이 같음.
    """
    x = as_tensor(x)
    if x.dim() == 1:
        x = x[None, :]
    check_batch(x, state.dim, "x")
    rng = rng or Rng(state.config.seed)
    z0 = gaussian_sample(rng, x.shape[0], state.dim)
    weight = torch.ones_like(x)
    z, out, losses, _ = _descend(
        z0,
        lambda u: deterministic_generator(state, flow_forward(state.flow, u)),
        x,
        weight,
        steps,
        lr,
        backtracking,
    )
    with torch.no_grad():
        x_hat = flow_forward(state.flow, z)
    return _results(state, x_hat, out, losses, steps, z=z)


def _snapshot_indices(steps: int, snapshots: int) -> List[int]:
    if snapshots < 1:
        raise ValueError(f"snapshots >= 1 이어야 합니다. ({snapshots})")
    if snapshots == 1:
        return [steps]
    return sorted(set(int(i) for i in np.round(np.linspace(0, steps, snapshots))))


def inpaint(
    state: CoopState,
    x_mask: torch.Tensor,
    mask: torch.Tensor,
    steps: int = 200,
    lr: float = 0.05,
    rng: Optional[Rng] = None,
    snapshots: int = 5,
) -> List[torch.Tensor]:
    """
    마스크 복원: L(x̂) = ‖M ⊙ (x_mask - F_θ(x̂))‖²

    2D 에서는 M=1 인 좌표를 고정하고 나머지를 채움.

    Returns:
        iteration 0 부터 마지막까지 고르게 뽑은 F_θ(x̂) 스냅샷 (마지막 포함)
    """
    x_mask = as_tensor(x_mask, (state.dim,))
    mask = as_tensor(mask, (state.dim,))
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("mask는 0/1 값만 가져야 합니다.")
    rng = rng or Rng(state.config.seed)
    indices = _snapshot_indices(steps, snapshots)
    z0 = gaussian_sample(rng, 1, state.dim)
    with torch.no_grad():
        x_hat0 = flow_forward(state.flow, z0)
    _, _, losses, outputs = _descend(
        x_hat0,
        lambda u: deterministic_generator(state, u),
        x_mask[None, :],
        mask[None, :],
        steps,
        lr,
        False,
    )
    logger.info(f"[TASK] inpainting 완료 - steps: {steps}, loss: {float(losses[-1][0]):.6f}")
    return [outputs[i][0] for i in indices]


def interpolate(
    state: CoopState,
    x_a: torch.Tensor,
    x_b: torch.Tensor,
    num: int = 8,
    recon_steps: int = 200,
    lr: float = 0.05,
    rng: Optional[Rng] = None,
) -> List[torch.Tensor]:
    """
    잠재공간 선형 보간

    두 끝점을 복원해 z_a, z_b 를 얻고 z_k = (1-λ_k) z_a + λ_k z_b 에 대해 F_θ(g_α(z_k), 0).
    λ=0, λ=1 끝점은 각 끝점의 복원 결과 그대로.
    """
    if num < 2:
        raise ValueError(f"num >= 2 이어야 합니다. ({num})")
    x_a = as_tensor(x_a, (state.dim,))
    x_b = as_tensor(x_b, (state.dim,))
    rec_a, rec_b = reconstruct_batch(state, torch.stack([x_a, x_b]), recon_steps, lr, rng)
    lambdas = torch.arange(1, num - 1, dtype=DTYPE)[:, None] / (num - 1)
    middle: List[torch.Tensor] = []
    if num > 2:
        z = (1.0 - lambdas) * rec_a.z_star[None, :] + lambdas * rec_b.z_star[None, :]
        with torch.no_grad():
            x = deterministic_generator(state, flow_forward(state.flow, z)).detach()
        middle = list(x)
    return [rec_a.x_recon, *middle, rec_b.x_recon]
