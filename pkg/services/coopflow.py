"""
CoopFlow 협력 학습

매 iteration:
  (i) z ~ q_0  (ii) x̂ = g_α(z)  (iii) x̃ = Langevin flow(x̂)
  (iv) x̃ 로 flow MLE 갱신 (웜업 중에는 생략)  (v) {x_i}, {x̃_i} 로 EBM 갱신
합성 샘플 x̃ 는 iteration 사이에 재사용하지 않음 (persistent chain 없음).
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from core.exceptions import DivergenceError
from core.rng import Rng
from core.tensor import check_batch, check_finite
from services.data_eval import Bounds, Dataset2D, density_grid, grid_kl, mmd_rbf
from services.diffnet import AdamState, adam_step
from services.langevin_flow import (
    EbmModel,
    ebm_grad_parts,
    initial_sample,
    langevin_flow,
    training_noise_scale,
)
from services.normflow import FlowModel, flow_logprob, flow_mle_step, flow_sample
from storage.schemas import ArchSpec, CoopConfig, LangevinConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IterationRecord:
    """iteration 하나의 진단값 (해당 없는 항목은 nan)"""

    iter: int
    epoch: int
    mean_logq: float
    ebm_grad_norm: float
    rel_moment_gap: float
    noise_scale: float


@dataclass(frozen=True)
class CoopState:
    """
    학습 상태 전체 (θ, α, Adam 모멘트, 카운터, 난수 상태, 진단 이력)

    epoch는 joint 단계 에폭 수, pretrain_epoch는 사전학습 에폭 수.
    """

    config: CoopConfig
    flow: FlowModel
    ebm: EbmModel
    flow_opt: AdamState
    ebm_opt: AdamState
    rng: Rng
    epoch: int = 0
    pretrain_epoch: int = 0
    iteration: int = 0
    history: Tuple[IterationRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.flow.dim != self.ebm.dim:
            raise ValueError(f"flow 차원({self.flow.dim})과 EBM 입력 차원({self.ebm.dim})이 다릅니다.")
        if len(self.history) != self.iteration:
            raise ValueError("history 길이와 완료된 iteration 수가 다릅니다.")

    @property
    def dim(self) -> int:
        return self.flow.dim

    @property
    def in_warmup(self) -> bool:
        return self.config.mode == "pretrained" and self.epoch < self.config.warmup_epochs


def init_state(config: CoopConfig, arch: ArchSpec, dim: int) -> CoopState:
    """seed로부터 flow(항등 변환 시작)와 EBM을 초기화"""
    rng = Rng(config.seed)
    flow = FlowModel.init(
        dim,
        arch.flow_depth,
        arch.flow_hidden,
        rng,
        scale_clamp=arch.scale_clamp,
        activation=arch.flow_activation,
        identity=True,
    )
    ebm = EbmModel.init(dim, arch.ebm_hidden, rng, arch.ebm_activation, arch.ebm_reference)
    flow_opt = AdamState.zeros(flow.num_params, config.flow_lr, config.flow_beta1, config.flow_beta2, config.adam_eps)
    ebm_opt = AdamState.zeros(ebm.num_params, config.ebm_lr, config.ebm_beta1, config.ebm_beta2, config.adam_eps)
    return CoopState(config, flow, ebm, flow_opt, ebm_opt, rng)


def synthesize(
    flow: FlowModel,
    ebm: EbmModel,
    cfg: LangevinConfig,
    n: int,
    rng: Rng,
    noise_scale: float,
    step_size: Optional[float] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """x̂ = g_α(z), x̃ = Langevin flow(x̂)"""
    _, x_hat = flow_sample(flow, n, rng)
    x_tilde = langevin_flow(ebm, x_hat, cfg, noise_scale, rng, step_size=step_size)
    return x_hat, x_tilde


def _ebm_update(state: CoopState, data_batch: torch.Tensor, synth: torch.Tensor):
    data_part = ebm_grad_parts(state.ebm, data_batch)
    grad = data_part - ebm_grad_parts(state.ebm, synth)
    check_finite(grad, "EBM gradient")
    params, ebm_opt = adam_step(state.ebm.flat_params(), -grad, state.ebm_opt)
    grad_norm = float(torch.linalg.vector_norm(grad))
    denom = float(torch.linalg.vector_norm(data_part))
    rel_gap = grad_norm / denom if denom > 0 else math.inf
    return state.ebm.with_flat_params(params), ebm_opt, grad_norm, rel_gap


def _record(state: CoopState, mean_logq: float, grad_norm: float, rel_gap: float, noise: float) -> Tuple[IterationRecord, ...]:
    record = IterationRecord(state.iteration + 1, state.epoch, mean_logq, grad_norm, rel_gap, noise)
    return state.history + (record,)


def coop_iteration(state: CoopState, data_batch: torch.Tensor) -> CoopState:
    """
    CoopFlow iteration 한 번 (입력 state는 변경하지 않음)

    Raises:
        DivergenceError: Langevin 체인 발산 또는 손실/gradient가 유한하지 않은 경우
    """
    check_batch(data_batch, state.dim, "data_batch")
    cfg = state.config
    rng = state.rng.clone()
    noise = training_noise_scale(cfg.langevin, state.epoch)

    _, x_tilde = synthesize(state.flow, state.ebm, cfg.langevin, data_batch.shape[0], rng, noise)

    if state.in_warmup:
        # 웜업: 사전학습된 flow 고정, Langevin flow(EBM)만 갱신
        flow, flow_opt = state.flow, state.flow_opt
        with torch.no_grad():
            mean_logq = float(flow_logprob(flow, x_tilde).mean())
    else:
        flow, flow_opt, mean_logq = flow_mle_step(state.flow, x_tilde, state.flow_opt)
    if not math.isfinite(mean_logq):
        raise DivergenceError(f"flow log-likelihood가 유한하지 않습니다. (iter={state.iteration + 1})")

    ebm, ebm_opt, grad_norm, rel_gap = _ebm_update(state, data_batch, x_tilde)
    return replace(
        state,
        flow=flow,
        ebm=ebm,
        flow_opt=flow_opt,
        ebm_opt=ebm_opt,
        rng=rng,
        iteration=state.iteration + 1,
        history=_record(state, mean_logq, grad_norm, rel_gap, noise),
    )


def flow_only_iteration(state: CoopState, data_batch: torch.Tensor) -> CoopState:
    """baseline: 관측 데이터에 대한 flow MLE만 수행"""
    check_batch(data_batch, state.dim, "data_batch")
    flow, flow_opt, mean_logq = flow_mle_step(state.flow, data_batch, state.flow_opt)
    if not math.isfinite(mean_logq):
        raise DivergenceError(f"flow log-likelihood가 유한하지 않습니다. (iter={state.iteration + 1})")
    return replace(
        state,
        flow=flow,
        flow_opt=flow_opt,
        iteration=state.iteration + 1,
        history=_record(state, mean_logq, math.nan, math.nan, 0.0),
    )


def shortrun_ebm_iteration(state: CoopState, data_batch: torch.Tensor) -> CoopState:
    """baseline: p_0 에서 시작하는 short-run Langevin으로 EBM만 학습"""
    check_batch(data_batch, state.dim, "data_batch")
    cfg = state.config
    rng = state.rng.clone()
    noise = training_noise_scale(cfg.langevin, state.epoch)
    x0 = initial_sample(cfg.shortrun_init, data_batch.shape[0], state.dim, rng, (cfg.shortrun_low, cfg.shortrun_high))
    x_tilde = langevin_flow(state.ebm, x0, cfg.langevin, noise, rng)
    ebm, ebm_opt, grad_norm, rel_gap = _ebm_update(state, data_batch, x_tilde)
    return replace(
        state,
        ebm=ebm,
        ebm_opt=ebm_opt,
        rng=rng,
        iteration=state.iteration + 1,
        history=_record(state, math.nan, grad_norm, rel_gap, noise),
    )


ITERATIONS: Dict[str, Callable[[CoopState, torch.Tensor], CoopState]] = {
    "scratch": coop_iteration,
    "pretrained": coop_iteration,
    "flow-only": flow_only_iteration,
    "short-run-ebm": shortrun_ebm_iteration,
}


def _pretrain_iteration(state: CoopState, data_batch: torch.Tensor) -> CoopState:
    flow, flow_opt, mean_logq = flow_mle_step(state.flow, data_batch, state.flow_opt)
    if not math.isfinite(mean_logq):
        raise DivergenceError("사전학습 중 flow log-likelihood가 유한하지 않습니다.")
    return replace(state, flow=flow, flow_opt=flow_opt)


def _run_epoch(state: CoopState, points: torch.Tensor, step: Callable[[CoopState, torch.Tensor], CoopState]) -> CoopState:
    # 에폭마다 실행 Rng로 셔플, 남는 꼬리 배치는 버림
    rng = state.rng.clone()
    perm = torch.from_numpy(rng.permutation(points.shape[0]))
    state = replace(state, rng=rng)
    m = state.config.batch_size
    for b in range(points.shape[0] // m):
        batch = points[perm[b * m:(b + 1) * m]]
        try:
            state = step(state, batch)
        except DivergenceError as e:
            e.state = state
            raise
    return state


def _epoch_message(state: CoopState) -> str:
    records = [r for r in state.history if r.epoch == state.epoch - 1]
    if not records:
        return f"epoch: {state.epoch}"
    mean_logq = float(np.mean([r.mean_logq for r in records]))
    rel_gap = float(np.mean([r.rel_moment_gap for r in records]))
    return f"epoch: {state.epoch}, mean_logq: {mean_logq:.4f}, rel_moment_gap: {rel_gap:.4f}"


def coop_train(
    config: CoopConfig,
    dataset: Union[Dataset2D, torch.Tensor],
    arch: ArchSpec = ArchSpec(),
    state: Optional[CoopState] = None,
    on_epoch_end: Optional[Callable[[CoopState], None]] = None,
    progress: bool = False,
) -> CoopState:
    """
    전체 학습 루프 (config, dataset 의 순수 함수; 모든 난수는 state.rng 에서)

    Args:
        config: 학습 설정
        dataset: [N, D] 관측 데이터
        arch: 모델 구조 (state가 없을 때만 사용)
        state: 이어서 학습할 상태 (체크포인트 재개)
        on_epoch_end: 에폭(사전학습 포함)이 끝날 때마다 호출
        progress: tqdm 진행 표시

    Raises:
        ValueError: 빈 데이터셋 또는 N < batch_size
        DivergenceError: 수치 발산 (e.state 에 마지막 정상 상태)
    """
    points = dataset.points if isinstance(dataset, Dataset2D) else dataset
    if points.dim() != 2 or points.shape[0] == 0:
        raise ValueError("빈 데이터셋으로는 학습할 수 없습니다.")
    if points.shape[0] < config.batch_size:
        raise ValueError(f"데이터 수({points.shape[0]})가 배치 크기({config.batch_size})보다 작습니다.")

    if state is None:
        state = init_state(config, arch, points.shape[1])
    else:
        state = replace(state, config=config)
    check_batch(points, state.dim, "dataset")

    if state.pretrain_epoch < config.pretrain_epochs:
        logger.info(f"[PRETRAIN] flow 사전학습 시작 - epochs: {config.pretrain_epochs}")
    for _ in tqdm(range(state.pretrain_epoch, config.pretrain_epochs), desc="pretrain", disable=not progress):
        state = _run_epoch(state, points, _pretrain_iteration)
        state = replace(state, pretrain_epoch=state.pretrain_epoch + 1)
        logger.info(f"[PRETRAIN] 에폭 완료 - epoch: {state.pretrain_epoch}")
        if on_epoch_end:
            on_epoch_end(state)

    step = ITERATIONS[config.mode]
    for _ in tqdm(range(state.epoch, config.epochs), desc=config.mode, disable=not progress):
        tag = "[WARMUP]" if state.in_warmup else "[TRAIN]"
        state = _run_epoch(state, points, step)
        state = replace(state, epoch=state.epoch + 1)
        logger.info(f"{tag} 에폭 완료 - {_epoch_message(state)}")
        if on_epoch_end:
            on_epoch_end(state)
    return state


# ========== 샘플링 ==========

def coop_sample(state: CoopState, n: int, rng: Rng, at_test: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    CoopFlow 샘플 π = K_θ q_α

    at_test이면 δ · test_step_ratio, 노이즈 0. 아니면 학습 때와 같은 δ와 노이즈.

    Returns:
        (x̂ flow 초기값, x̃ Langevin 수정 결과)
    """
    if n < 1:
        raise ValueError("n >= 1 이어야 합니다.")
    lcfg = state.config.langevin
    if at_test:
        step, noise = lcfg.step_size * lcfg.test_step_ratio, 0.0
    else:
        step, noise = lcfg.step_size, training_noise_scale(lcfg, state.epoch)
    return synthesize(state.flow, state.ebm, lcfg, n, rng, noise, step_size=step)


def generate(state: CoopState, n: int, rng: Rng, at_test: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    학습 모드에 맞는 생성기 (초기값, 최종 샘플)
    - flow-only: (x̂, x̂)
    - short-run-ebm: (x0 ~ p_0, Langevin 결과)
    - 그 외: coop_sample
    """
    cfg = state.config
    if cfg.mode == "flow-only":
        _, x_hat = flow_sample(state.flow, n, rng)
        return x_hat, x_hat
    if cfg.mode == "short-run-ebm":
        lcfg = cfg.langevin
        step, noise = (lcfg.step_size * lcfg.test_step_ratio, 0.0) if at_test else (lcfg.step_size, training_noise_scale(lcfg, state.epoch))
        x0 = initial_sample(cfg.shortrun_init, n, state.dim, rng, (cfg.shortrun_low, cfg.shortrun_high))
        return x0, langevin_flow(state.ebm, x0, lcfg, noise, rng, step_size=step)
    return coop_sample(state, n, rng, at_test)


# ========== 진단 ==========

def moment_gap_from_samples(ebm: EbmModel, data: torch.Tensor, synth: torch.Tensor) -> Tuple[float, float]:
    """
    ‖E_data[∇_θ f] - E_synth[∇_θ f]‖₂ 와 상대값 (분모 0이면 inf)
    """
    data_part = ebm_grad_parts(ebm, data)
    gap = float(torch.linalg.vector_norm(data_part - ebm_grad_parts(ebm, synth)))
    denom = float(torch.linalg.vector_norm(data_part))
    return gap, (gap / denom if denom > 0 else math.inf)


def moment_gap(state: CoopState, data: Union[Dataset2D, torch.Tensor], n: int, rng: Rng) -> Tuple[float, float]:
    """
    모멘트 매칭 간격: x̃ 는 학습 때와 같은 설정의 생성기에서 n개 추출

    Returns:
        (gap, rel_gap)
    """
    points = data.points if isinstance(data, Dataset2D) else data
    if n < 1 or points.shape[0] < 1:
        raise ValueError("빈 입력으로는 moment gap을 계산할 수 없습니다.")
    _, synth = generate(state, n, rng, at_test=False)
    return moment_gap_from_samples(state.ebm, points, synth)


def epoch_summary(history: Sequence[IterationRecord]) -> List[Dict[str, float]]:
    """에폭별 진단 평균"""
    by_epoch: Dict[int, List[IterationRecord]] = {}
    for record in history:
        by_epoch.setdefault(record.epoch, []).append(record)
    rows = []
    for epoch in sorted(by_epoch):
        records = by_epoch[epoch]
        row = {"epoch": epoch, "iterations": len(records)}
        for key in ("mean_logq", "ebm_grad_norm", "rel_moment_gap", "noise_scale"):
            row[key] = float(np.mean([getattr(r, key) for r in records]))
        rows.append(row)
    return rows


def fixed_point_report(history: Sequence[IterationRecord], window: int = 10, logq_tolerance: float = 0.2) -> Dict[str, object]:
    """
    고정점 진단
    - 첫 에폭 rel_gap 대비 마지막 window 에폭 평균 rel_gap 비율
    - window 에폭 단위 평균 log q(x̃) 가 (허용오차 내에서) 감소하지 않는지
    """
    rows = epoch_summary(history)
    if not rows:
        return {"epochs": 0}
    first = rows[0]["rel_moment_gap"]
    last = float(np.mean([r["rel_moment_gap"] for r in rows[-window:]]))
    windows = [
        float(np.mean([r["mean_logq"] for r in rows[i:i + window]]))
        for i in range(0, len(rows) - window + 1, window)
    ]
    monotone = all(b >= a - logq_tolerance for a, b in zip(windows, windows[1:]))
    return {
        "epochs": len(rows),
        "first_rel_gap": first,
        "last_window_rel_gap": last,
        "rel_gap_ratio": last / first if first > 0 else math.nan,
        "window_mean_logq": windows,
        "logq_non_decreasing": monotone,
    }


def shortrun_kl_curve(
    ebm: EbmModel,
    cfg: LangevinConfig,
    step_counts: Sequence[int],
    n: int,
    rng: Rng,
    bounds: Bounds,
    resolution: int = 100,
    smoothing: float = 1e-6,
    init: str = "gaussian",
) -> List[Tuple[int, float]]:
    """
    T 별 그리드 KL(p̃_θ ‖ p_θ)

    같은 초기 체인에서 시작해 노이즈를 포함한 Langevin을 T만큼 이어 돌림.
    p_θ 는 EBM 밀도 그리드(그리드 Z(θ) 추정으로 정규화).
    """
    target = density_grid(ebm, bounds, resolution)
    x = initial_sample(init, n, ebm.dim, rng, bounds)
    done, curve = 0, []
    for t in sorted(step_counts):
        x = langevin_flow(ebm, x, cfg.model_copy(update={"n_steps": t - done}), 1.0, rng)
        done = t
        curve.append((t, grid_kl(x, target, resolution, smoothing, bounds)))
    return curve


def sweep_test_time(
    state: CoopState,
    data: torch.Tensor,
    step_counts: Sequence[int],
    step_ratios: Sequence[float],
    n: int,
    rng: Rng,
    bandwidth: Union[float, str] = 0.5,
) -> List[Dict[str, float]]:
    """
    테스트 시 (T, δ 배율) 조합별 CoopFlow 샘플 MMD

    모든 조합이 같은 flow 초기값 x̂ 를 공유함.
    """
    _, x_hat = flow_sample(state.flow, n, rng)
    base = state.config.langevin
    rows = []
    for t in step_counts:
        for ratio in step_ratios:
            cfg = base.model_copy(update={"n_steps": int(t)})
            x = langevin_flow(state.ebm, x_hat, cfg, 0.0, None, step_size=base.step_size * ratio)
            rows.append({
                "n_steps": int(t),
                "step_ratio": float(ratio),
                "step_size": base.step_size * ratio,
                "mmd": mmd_rbf(x, data, bandwidth),
            })
            logger.info(f"[EVAL] sweep - T: {t}, ratio: {ratio}, mmd: {rows[-1]['mmd']:.4f}")
    return rows
