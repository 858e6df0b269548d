"""
CLI 명령 하나에 대응하는 실행 오케스트레이션

RunConfig로부터 데이터셋/모델을 만들고 학습, 샘플링, 평가, 후속 작업을 수행한 뒤
CheckpointManager로 결과 파일을 기록함.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch
from pydantic import ValidationError

from config.presets import get_preset
from config.settings import CHECKPOINT_FILE, SHOW_PROGRESS, TRAIN_LOG_FILE
from core.exceptions import CheckpointError, ConfigError, DivergenceError
from core.rng import Rng
from core.tensor import as_tensor
from services.coopflow import (
    CoopState,
    coop_train,
    epoch_summary,
    generate,
    moment_gap,
    moment_gap_from_samples,
    sweep_test_time,
)
from services.data_eval import Dataset2D, density_grid, grid_kl, make_dataset, mmd_rbf
from services.tasks import inpaint, interpolate, reconstruct_batch
from storage.checkpoint_manager import CheckpointManager, load_checkpoint, read_points
from storage.init_store import init_output_dir
from storage.schemas import RunConfig, deep_merge, resolve_key, set_path

logger = logging.getLogger(__name__)


def build_run_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    기본값 < preset < config 파일 < 플래그 순으로 합쳐 RunConfig 생성

    Args:
        preset: preset 이름
        config_path: JSON config 파일 경로
        overrides: {플래그 키: 값} (키는 leaf 이름 또는 점 경로)

    Raises:
        ConfigError: 알 수 없는 키, 읽을 수 없는 파일, 검증 실패
    """
    doc: Dict[str, Any] = {}
    if preset:
        doc = deep_merge(doc, get_preset(preset))
    if config_path:
        try:
            file_doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"config 파일을 읽을 수 없습니다: {config_path} ({e})") from e
        if not isinstance(file_doc, dict):
            raise ConfigError("config 파일은 JSON 객체여야 합니다.")
        if file_doc.get("preset") and not preset:
            doc = deep_merge(get_preset(file_doc["preset"]), doc)
        doc = deep_merge(doc, file_doc)
    for key, value in (overrides or {}).items():
        try:
            doc = set_path(doc, resolve_key(key), value)
        except KeyError as e:
            raise ConfigError(str(e.args[0])) from e
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"설정 검증 실패: {e}") from e


def dataset_for(run_config: RunConfig, held_out: bool = False) -> Dataset2D:
    """학습 데이터는 seed, held-out 데이터는 seed + 1 로 결정적으로 생성"""
    spec = run_config.dataset
    seed = run_config.coop.seed + (1 if held_out else 0)
    return make_dataset(spec.generator, spec.n_points, spec.noise_sigma, Rng(seed))


class RunService:
    """출력 디렉토리 하나에 대한 실행 서비스"""

    def __init__(self, out_dir):
        self.out_dir = init_output_dir(out_dir)
        self.store = CheckpointManager(self.out_dir)

    # ========== 학습 ==========

    def train(self, run_config: RunConfig, resume: bool = False, progress: bool = SHOW_PROGRESS) -> CoopState:
        """
        학습 후 체크포인트, 학습 로그, 샘플, 밀도 래스터 기록

        발산하면 마지막 정상 상태를 ckpt.json.partial, train_log.csv.partial 로 남기고 예외를 다시 던짐.
        체크포인트와 로그는 샘플, 래스터까지 끝난 뒤에 최종 이름으로 옮김.
        """
        init_output_dir(self.out_dir, clean=True)
        dataset = dataset_for(run_config)
        self.store.write_dataset(dataset, run_config.coop.seed)

        state = None
        if resume and self.store.path(CHECKPOINT_FILE).is_file():
            state, saved, _ = self.store.load_checkpoint()
            if saved.arch != run_config.arch or saved.dataset != run_config.dataset:
                raise CheckpointError("재개할 체크포인트의 구조/데이터셋 설정이 현재 설정과 다릅니다.")
            logger.info(f"[TRAIN] 체크포인트에서 재개 - epoch: {state.epoch}, pretrain_epoch: {state.pretrain_epoch}")

        logger.info(f"🚀 [TRAIN] 학습 시작 - mode: {run_config.coop.mode}, epochs: {run_config.coop.epochs}, seed: {run_config.coop.seed}")
        try:
            state = coop_train(run_config.coop, dataset, run_config.arch, state=state, progress=progress)
        except DivergenceError as e:
            if e.state is not None:
                self.store.save_checkpoint(e.state, run_config, partial=True)
                self.store.write_train_log(e.state.history, partial=True)
            raise

        self.store.save_checkpoint(state, run_config, self._diagnostics(state), partial=True)
        self.store.write_train_log(state.history, partial=True)
        self._write_samples(state, run_config.metrics.mmd_samples, run_config.coop.seed)
        self._write_rasters(state, run_config)
        self.store.promote(CHECKPOINT_FILE)
        self.store.promote(TRAIN_LOG_FILE)
        logger.info(f"✅ [TRAIN] 학습 완료 - epoch: {state.epoch}, iterations: {state.iteration}")
        return state

    @staticmethod
    def _diagnostics(state: CoopState) -> Dict[str, float]:
        rows = epoch_summary(state.history)
        if not rows:
            return {}
        last = rows[-1]
        return {k: float(last[k]) for k in ("mean_logq", "ebm_grad_norm", "rel_moment_gap", "noise_scale")}

    def _write_samples(self, state: CoopState, n: int, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
        x_hat, x_tilde = generate(state, n, Rng(seed), at_test=True)
        self.store.write_samples(x_hat.detach(), x_tilde.detach())
        return x_hat, x_tilde

    def _write_rasters(self, state: CoopState, run_config: RunConfig, resolution: Optional[int] = None, bound: Optional[float] = None):
        metrics = run_config.metrics
        resolution = resolution or metrics.raster_resolution
        bound = bound or metrics.grid_bound
        bounds = (-bound, bound)
        paths = [
            self.store.write_raster("flow_density.ppm", density_grid(state.flow, bounds, resolution)),
            self.store.write_raster("ebm_density.ppm", density_grid(state.ebm, bounds, resolution)),
        ]
        logger.info(f"[SAMPLE] 밀도 래스터 저장 - G: {resolution}, bounds: {bounds}")
        return paths

    # ========== 체크포인트 기반 명령 ==========

    def load(self, checkpoint: Optional[str] = None) -> Tuple[CoopState, RunConfig]:
        if checkpoint:
            state, run_config, _ = load_checkpoint(checkpoint)
        else:
            state, run_config, _ = self.store.load_checkpoint()
        return state, run_config

    def sample(self, state: CoopState, n: int, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """x̂ (flow) 와 x̃ (CoopFlow) 샘플 CSV 기록"""
        if n < 1:
            raise ConfigError("샘플 수는 1 이상이어야 합니다.")
        x_hat, x_tilde = self._write_samples(state, n, seed)
        logger.info(f"[SAMPLE] 샘플 저장 완료 - n: {n}, seed: {seed}")
        return x_hat, x_tilde

    def density(self, state: CoopState, run_config: RunConfig, resolution: Optional[int] = None, bound: Optional[float] = None):
        return self._write_rasters(state, run_config, resolution, bound)

    def evaluate(
        self,
        state: CoopState,
        run_config: RunConfig,
        seed: int,
        flow_samples: Optional[str] = None,
        coop_samples: Optional[str] = None,
    ) -> Dict[str, float]:
        """
        held-out 데이터 대비 MMD / 그리드 KL / 상대 moment gap 보고서 (eval.json)

        샘플 파일이 주어지면 그 파일을, 아니면 체크포인트에서 새로 샘플링함.
        """
        metrics = run_config.metrics
        held_out = dataset_for(run_config, held_out=True)
        data = held_out.points[: metrics.mmd_samples]
        rng = Rng(seed)
        if flow_samples is None or coop_samples is None:
            x_hat, x_tilde = generate(state, metrics.mmd_samples, rng, at_test=True)
        x_flow = read_points(flow_samples) if flow_samples else x_hat.detach()
        x_coop = read_points(coop_samples) if coop_samples else x_tilde.detach()

        bounds = (-metrics.grid_bound, metrics.grid_bound)
        if coop_samples:
            _, rel_gap = moment_gap_from_samples(state.ebm, data, x_coop)
        else:
            _, rel_gap = moment_gap(state, data, metrics.mmd_samples, rng)
        report = {
            "mmd_flow": mmd_rbf(x_flow, data, metrics.mmd_bandwidth),
            "mmd_coop": mmd_rbf(x_coop, data, metrics.mmd_bandwidth),
            "gridkl_flow": grid_kl(data, x_flow, metrics.grid_resolution, metrics.kl_smoothing, bounds),
            "gridkl_coop": grid_kl(data, x_coop, metrics.grid_resolution, metrics.kl_smoothing, bounds),
            "rel_moment_gap": rel_gap,
            "seed": seed,
        }
        self.store.write_json("eval.json", report)
        logger.info(f"[EVAL] 평가 완료 - mmd_flow: {report['mmd_flow']:.4f}, mmd_coop: {report['mmd_coop']:.4f}")
        return report

    def sweep(
        self,
        state: CoopState,
        run_config: RunConfig,
        step_counts: Sequence[int],
        step_ratios: Sequence[float],
        seed: int,
    ) -> List[Dict[str, float]]:
        """테스트 시 (T, δ 배율) 조합 MMD -> sweep.csv"""
        metrics = run_config.metrics
        data = dataset_for(run_config, held_out=True).points[: metrics.mmd_samples]
        rows = sweep_test_time(state, data, step_counts, step_ratios, metrics.mmd_samples, Rng(seed), metrics.mmd_bandwidth)
        self.store.write_rows("sweep.csv", rows, ["n_steps", "step_ratio", "step_size", "mmd"])
        return rows

    # ========== 후속 작업 ==========

    def reconstruct(
        self,
        state: CoopState,
        run_config: RunConfig,
        points: Optional[torch.Tensor],
        n: int,
        steps: int,
        lr: float,
        seed: int,
        backtracking: bool = False,
    ):
        """복원 결과 recon.csv (점마다 한 행)"""
        if points is None:
            points = dataset_for(run_config, held_out=True).points[:n]
        results = reconstruct_batch(state, as_tensor(points), steps, lr, Rng(seed), backtracking)
        rows = []
        for x, r in zip(points.tolist(), results):
            rows.append({
                "x0": x[0], "x1": x[1],
                "xhat0": float(r.x_hat_star[0]), "xhat1": float(r.x_hat_star[1]),
                "recon0": float(r.x_recon[0]), "recon1": float(r.x_recon[1]),
                "z0": float(r.z_star[0]), "z1": float(r.z_star[1]),
                "loss_initial": r.loss_trajectory[0], "loss_final": r.loss_trajectory[-1],
            })
        self.store.write_rows("recon.csv", rows)
        return results

    def inpaint(
        self,
        state: CoopState,
        x_mask: Sequence[float],
        mask: Sequence[float],
        steps: int,
        lr: float,
        seed: int,
        snapshots: int,
        completions: int = 1,
    ) -> List[List[torch.Tensor]]:
        """
        completions 개의 독립 seed 로 inpainting, inpaint.csv 에 스냅샷별 열 (s{k}_x{i})
        """
        runs, rows = [], []
        for c in range(completions):
            shots = inpaint(state, x_mask, mask, steps, lr, Rng(seed).spawn(c), snapshots)
            runs.append(shots)
            row: Dict[str, Any] = {"completion": c}
            for k, shot in enumerate(shots):
                for i, v in enumerate(shot.tolist()):
                    row[f"s{k}_x{i}"] = v
            rows.append(row)
        self.store.write_rows("inpaint.csv", rows)
        return runs

    def interpolate(
        self,
        state: CoopState,
        x_a: Sequence[float],
        x_b: Sequence[float],
        num: int,
        steps: int,
        lr: float,
        seed: int,
    ) -> List[torch.Tensor]:
        """잠재공간 보간 경로 interpolate.csv (k, lambda, x0, x1)"""
        path = interpolate(state, x_a, x_b, num, steps, lr, Rng(seed))
        rows = []
        for k, x in enumerate(path):
            row: Dict[str, Any] = {"k": k, "lambda": k / (num - 1)}
            row.update({f"x{i}": v for i, v in enumerate(x.tolist())})
            rows.append(row)
        self.store.write_rows("interpolate.csv", rows)
        return path
