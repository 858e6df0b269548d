import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError

from config.settings import (
    CHECKPOINT_FILE,
    CHECKPOINT_FORMAT_VERSION,
    PARTIAL_SUFFIX,
    SAMPLES_FILE,
    TRAIN_LOG_FILE,
)
from core.exceptions import CheckpointError
from core.rng import Rng
from core.tensor import DTYPE, as_tensor
from services.coopflow import CoopState, IterationRecord
from services.data_eval import Dataset2D, DensityGrid
from services.diffnet import AdamState
from services.langevin_flow import EbmModel
from services.normflow import FlowModel
from storage.schemas import (
    AdamDocument,
    CheckpointDocument,
    IterationRecordDocument,
    RngDocument,
    RunConfig,
)

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["iter", "epoch", "mean_logq", "ebm_grad_norm", "rel_moment_gap", "noise_scale"]


def _format(value: Any) -> str:
    # repr는 float64 최단 왕복 표현
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _adam_document(opt: AdamState) -> AdamDocument:
    return AdamDocument(
        m=opt.m.tolist(),
        v=opt.v.tolist(),
        step=opt.step,
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
        lr=opt.lr,
    )


def _adam_state(doc: AdamDocument, num_params: int, name: str) -> AdamState:
    if len(doc.m) != num_params or len(doc.v) != num_params:
        raise CheckpointError(f"{name} Adam 상태 길이가 파라미터 수({num_params})와 다릅니다.")
    return AdamState(
        m=torch.tensor(doc.m, dtype=DTYPE),
        v=torch.tensor(doc.v, dtype=DTYPE),
        step=doc.step,
        beta1=doc.beta1,
        beta2=doc.beta2,
        eps=doc.eps,
        lr=doc.lr,
    )


def state_to_document(state: CoopState, run_config: RunConfig, diagnostics: Optional[Dict[str, float]] = None) -> CheckpointDocument:
    """CoopState -> 체크포인트 문서"""
    rng_doc = state.rng.get_state()
    return CheckpointDocument(
        format_version=CHECKPOINT_FORMAT_VERSION,
        run_config=run_config.model_copy(update={"coop": state.config}),
        dim=state.dim,
        flow_params=state.flow.flat_params().tolist(),
        ebm_params=state.ebm.flat_params().tolist(),
        flow_opt=_adam_document(state.flow_opt),
        ebm_opt=_adam_document(state.ebm_opt),
        epoch=state.epoch,
        pretrain_epoch=state.pretrain_epoch,
        iteration=state.iteration,
        rng=RngDocument(**rng_doc),
        history=[IterationRecordDocument(**asdict(r)) for r in state.history],
        diagnostics=dict(diagnostics or {}),
    )


def document_to_state(doc: CheckpointDocument) -> CoopState:
    """
    체크포인트 문서 -> CoopState (모델 구조는 run_config.arch 로 다시 만듦)

    Raises:
        CheckpointError: 포맷 버전/파라미터 길이/RNG 알고리즘 불일치
    """
    if doc.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"지원하지 않는 체크포인트 포맷 버전: {doc.format_version}")
    arch = doc.run_config.arch
    coop = doc.run_config.coop
    # 구조만 필요하므로 임의 seed로 초기화 후 파라미터를 덮어씀
    skeleton_rng = Rng(0)
    flow = FlowModel.init(
        doc.dim, arch.flow_depth, arch.flow_hidden, skeleton_rng,
        scale_clamp=arch.scale_clamp, activation=arch.flow_activation,
    )
    ebm = EbmModel.init(doc.dim, arch.ebm_hidden, skeleton_rng, arch.ebm_activation, arch.ebm_reference)
    if len(doc.flow_params) != flow.num_params or len(doc.ebm_params) != ebm.num_params:
        raise CheckpointError(
            f"파라미터 길이 불일치 (flow {len(doc.flow_params)}/{flow.num_params}, ebm {len(doc.ebm_params)}/{ebm.num_params})"
        )
    if len(doc.history) != doc.iteration:
        raise CheckpointError("history 길이와 iteration 카운터가 다릅니다.")
    return CoopState(
        config=coop,
        flow=flow.with_flat_params(torch.tensor(doc.flow_params, dtype=DTYPE)),
        ebm=ebm.with_flat_params(torch.tensor(doc.ebm_params, dtype=DTYPE)),
        flow_opt=_adam_state(doc.flow_opt, flow.num_params, "flow"),
        ebm_opt=_adam_state(doc.ebm_opt, ebm.num_params, "ebm"),
        rng=Rng.from_state(doc.rng.model_dump()),
        epoch=doc.epoch,
        pretrain_epoch=doc.pretrain_epoch,
        iteration=doc.iteration,
        history=tuple(IterationRecord(**r.model_dump()) for r in doc.history),
    )


class CheckpointManager:
    """실행 출력 디렉토리의 파일 입출력 관리 클래스 (모든 쓰기는 임시 파일 후 rename)"""

    def __init__(self, out_dir):
        """
        Args:
            out_dir: 출력 디렉토리 (init_output_dir 로 미리 생성)
        """
        self.out_dir = Path(out_dir)

    def path(self, name: str, partial: bool = False) -> Path:
        return self.out_dir / (name + PARTIAL_SUFFIX if partial else name)

    def _write_bytes(self, name: str, data: bytes, partial: bool = False) -> Path:
        target = self.path(name, partial)
        tmp = target.with_name(target.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, target)
        return target

    def _write_text(self, name: str, text: str, partial: bool = False) -> Path:
        return self._write_bytes(name, text.encode("utf-8"), partial)

    def promote(self, name: str) -> Path:
        """name.partial -> name (원자적 교체)"""
        target = self.path(name)
        os.replace(self.path(name, partial=True), target)
        return target

    def _write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]], partial: bool = False) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])
        return self._write_text(name, buf.getvalue(), partial)

    # ========== 체크포인트 ==========

    def save_checkpoint(
        self,
        state: CoopState,
        run_config: RunConfig,
        diagnostics: Optional[Dict[str, float]] = None,
        partial: bool = False,
        name: str = CHECKPOINT_FILE,
    ) -> Path:
        """
        체크포인트 저장 (키 정렬, 같은 상태 -> 같은 바이트)

        Returns:
            저장된 파일 경로
        """
        doc = state_to_document(state, run_config, diagnostics)
        path = self._write_text(name, dump_document(doc), partial)
        logger.info(f"[CKPT] 저장 완료 - path: {path}, epoch: {state.epoch}, iter: {state.iteration}")
        return path

    def load_checkpoint(self, name: str = CHECKPOINT_FILE) -> Tuple[CoopState, RunConfig, CheckpointDocument]:
        return load_checkpoint(self.path(name))

    # ========== 학습 로그 / 샘플 ==========

    def write_train_log(self, history: Sequence[IterationRecord], partial: bool = False) -> Path:
        rows = ([getattr(r, k) for k in TRAIN_LOG_HEADER] for r in history)
        return self._write_csv(TRAIN_LOG_FILE, TRAIN_LOG_HEADER, rows, partial)

    def write_points(self, name: str, points: torch.Tensor, partial: bool = False) -> Path:
        header = [f"x{i}" for i in range(points.shape[1])]
        return self._write_csv(name, header, points.tolist(), partial)

    def write_samples(self, flow_points: torch.Tensor, coop_points: torch.Tensor, partial: bool = False) -> List[Path]:
        """samples_flow.csv, samples_coop.csv, samples.csv(kind 열 포함)"""
        d = flow_points.shape[1]
        header = [f"x{i}" for i in range(d)] + ["kind"]
        rows = [p + ["flow"] for p in flow_points.tolist()] + [p + ["coop"] for p in coop_points.tolist()]
        return [
            self.write_points("samples_flow.csv", flow_points, partial),
            self.write_points("samples_coop.csv", coop_points, partial),
            self._write_csv(SAMPLES_FILE, header, rows, partial),
        ]

    def write_rows(self, name: str, rows: Sequence[Dict[str, Any]], header: Optional[Sequence[str]] = None) -> Path:
        header = list(header or (rows[0].keys() if rows else []))
        return self._write_csv(name, header, ([row[k] for k in header] for row in rows))

    def write_json(self, name: str, doc: Dict[str, Any]) -> Path:
        return self._write_text(name, to_json(doc) + "\n")

    # ========== 데이터셋 ==========

    def write_dataset(self, dataset: Dataset2D, seed: int) -> List[Path]:
        """dataset.csv (x0,x1) + dataset.json (생성기 정보)"""
        sidecar = {
            "generator_id": dataset.generator_id,
            "generator_params": dataset.generator_params,
            "seed": seed,
            "bounds": list(dataset.bounds),
            "n_points": len(dataset),
        }
        paths = [self.write_points("dataset.csv", dataset.points), self.write_json("dataset.json", sidecar)]
        logger.info(f"[DATA] 데이터셋 저장 - generator: {dataset.generator_id}, n: {len(dataset)}")
        return paths

    def load_dataset(self) -> Dataset2D:
        sidecar = json.loads(self.path("dataset.json").read_text(encoding="utf-8"))
        points = read_points(self.path("dataset.csv"))
        return Dataset2D(points, sidecar["generator_id"], sidecar["generator_params"], tuple(sidecar["bounds"]))

    # ========== 래스터 ==========

    def write_raster(self, name: str, grid: DensityGrid) -> Path:
        """
        밀도 그리드를 8비트 PPM(P5) 로 저장

        셀 질량을 이미지마다 min-max 스케일링, 위쪽 행이 큰 y.
        """
        image = grid_to_image(grid)
        buf = io.BytesIO()
        image.save(buf, format="PPM")
        return self._write_bytes(name, buf.getvalue())


def json_safe(obj: Any) -> Any:
    """nan/inf 는 표준 JSON 에 없으므로 "NaN" / "Infinity" / "-Infinity" 문자열로 바꿈"""
    if isinstance(obj, float) and not math.isfinite(obj):
        return "NaN" if math.isnan(obj) else ("Infinity" if obj > 0 else "-Infinity")
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def to_json(doc: Any, indent: Optional[int] = None) -> str:
    return json.dumps(json_safe(doc), sort_keys=True, indent=indent, allow_nan=False)


def dump_document(doc: CheckpointDocument) -> str:
    return to_json(doc.model_dump(mode="python"), indent=1) + "\n"


def load_checkpoint(path) -> Tuple[CoopState, RunConfig, CheckpointDocument]:
    """
    체크포인트 파일 읽기

    Raises:
        CheckpointError: 파일 없음, JSON 손상, 스키마/구조 불일치
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"체크포인트 파일이 없습니다: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        doc = CheckpointDocument.model_validate(raw)
    except (json.JSONDecodeError, UnicodeDecodeError, ValidationError) as e:
        raise CheckpointError(f"체크포인트가 손상되었습니다: {path} ({e})") from e
    try:
        state = document_to_state(doc)
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"체크포인트 복원 실패: {e}") from e
    logger.info(f"[CKPT] 로드 완료 - path: {path}, epoch: {state.epoch}, iter: {state.iteration}")
    return state, doc.run_config, doc


def read_points(path) -> torch.Tensor:
    """
    x0,x1,... 헤더의 CSV 점 파일 읽기 (kind 같은 문자열 열은 무시)

    Raises:
        ValueError: 파일 형식 오류
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "x0":
            raise ValueError(f"점 CSV 헤더가 올바르지 않습니다: {path}")
        cols = [i for i, h in enumerate(header) if h.startswith("x")]
        rows = [[float(row[i]) for i in cols] for row in reader if row]
    if not rows:
        return torch.zeros((0, len(cols)), dtype=DTYPE)
    return as_tensor(rows)


def grid_to_image(grid: DensityGrid) -> Image.Image:
    mass = grid.mass().numpy()
    lo, hi = float(mass.min()), float(mass.max())
    scaled = np.zeros_like(mass) if hi - lo <= 0 or not math.isfinite(hi - lo) else (mass - lo) / (hi - lo)
    pixels = np.flipud(np.round(scaled * 255.0)).astype(np.uint8)
    return Image.fromarray(np.ascontiguousarray(pixels))
