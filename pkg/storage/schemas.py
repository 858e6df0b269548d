from typing import Annotated, Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator


# ========== 학습 설정 스키마 ==========

class LangevinConfig(BaseModel):
    """
    Langevin flow 설정
    - n_steps: T (0이면 항등 변환)
    - step_size: δ (데이터 단위)
    - noise_mode: full(식 그대로) / off(노이즈 제거, 학습 기본값) / decay(에폭에 따라 감쇠)
    - decay_epochs: 감쇠 기간 K
    - test_step_ratio: 테스트 샘플링 시 δ에 곱하는 배율
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_steps: int = Field(100, ge=0)
    step_size: float = Field(0.03, gt=0)
    noise_mode: Literal["full", "off", "decay"] = "off"
    decay_epochs: int = Field(30, ge=1)
    test_step_ratio: float = Field(4.0 / 3.0, gt=0)


class CoopConfig(BaseModel):
    """
    CoopFlow 학습 설정 (Adam 기본값은 flow β=(0.9, 0.999), EBM β=(0.5, 0.5), lr=1e-4)
    - mode: scratch / pretrained(사전학습 + 웜업) / flow-only, short-run-ebm(비교용 baseline)
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["scratch", "pretrained", "flow-only", "short-run-ebm"] = "scratch"
    epochs: int = Field(100, ge=0)
    pretrain_epochs: int = Field(0, ge=0)
    warmup_epochs: int = Field(0, ge=0)
    batch_size: int = Field(200, ge=1)
    flow_lr: float = Field(1e-4, ge=0)
    flow_beta1: float = Field(0.9, ge=0, lt=1)
    flow_beta2: float = Field(0.999, ge=0, lt=1)
    ebm_lr: float = Field(1e-4, ge=0)
    ebm_beta1: float = Field(0.5, ge=0, lt=1)
    ebm_beta2: float = Field(0.5, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    seed: int = 0
    # short-run EBM baseline의 초기 분포 p_0
    shortrun_init: Literal["uniform", "gaussian"] = "uniform"
    shortrun_low: float = -1.5
    shortrun_high: float = 1.5
    langevin: LangevinConfig = LangevinConfig()

    @model_validator(mode="after")
    def check_phases(self) -> "CoopConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs({self.warmup_epochs})가 epochs({self.epochs})보다 클 수 없습니다.")
        if self.mode == "scratch" and self.pretrain_epochs != 0:
            raise ValueError("scratch 모드에서는 pretrain_epochs가 0이어야 합니다.")
        if not self.shortrun_low < self.shortrun_high:
            raise ValueError("shortrun_low < shortrun_high 이어야 합니다.")
        return self


class DatasetSpec(BaseModel):
    """2D 데이터셋 생성 설정"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    generator: Literal["spiral", "eight-gaussians", "two-rings", "checkerboard"] = "spiral"
    n_points: int = Field(10000, ge=1)
    noise_sigma: float = Field(0.05, ge=0)


class ArchSpec(BaseModel):
    """모델 구조 (flow coupling 레이어 수, subnet/EBM 은닉층 크기와 activation)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    flow_depth: int = Field(8, ge=1)
    flow_hidden: List[int] = [64, 64]
    flow_activation: Literal["swish", "tanh"] = "tanh"
    scale_clamp: float = Field(2.0, gt=0)
    ebm_hidden: List[int] = [64, 64]
    ebm_activation: Literal["swish", "tanh"] = "swish"
    ebm_reference: Literal["none", "standard-gaussian"] = "standard-gaussian"


class MetricSpec(BaseModel):
    """평가 설정 (MMD 대역폭, 그리드 해상도 등)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mmd_bandwidth: Union[float, Literal["median"]] = 0.5
    mmd_samples: int = Field(2000, ge=2)
    grid_resolution: int = Field(100, ge=16)
    grid_bound: float = Field(1.5, gt=0)
    kl_smoothing: float = Field(1e-6, ge=0)
    raster_resolution: int = Field(128, ge=2)


class RunConfig(BaseModel):
    """
    실행 하나를 완전히 기술하는 설정 (config 파일 ∪ preset ∪ 플래그)
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Optional[str] = None
    out_dir: Optional[str] = None
    coop: CoopConfig = CoopConfig()
    dataset: DatasetSpec = DatasetSpec()
    arch: ArchSpec = ArchSpec()
    metrics: MetricSpec = MetricSpec()


# ========== 체크포인트 스키마 ==========

def _parse_nonfinite(value):
    # JSON에는 NaN/Infinity 리터럴이 없어서 문자열로 저장됨
    if isinstance(value, str) and value in ("NaN", "Infinity", "-Infinity"):
        return float(value)
    return value


MaybeFloat = Annotated[float, BeforeValidator(_parse_nonfinite)]


class AdamDocument(BaseModel):
    m: List[float]
    v: List[float]
    step: int
    beta1: float
    beta2: float
    eps: float
    lr: float


class RngDocument(BaseModel):
    algorithm_id: str
    seed: int
    state: Dict[str, Any]


class IterationRecordDocument(BaseModel):
    iter: int
    epoch: int
    mean_logq: MaybeFloat
    ebm_grad_norm: MaybeFloat
    rel_moment_gap: MaybeFloat
    noise_scale: MaybeFloat


class CheckpointDocument(BaseModel):
    """
    체크포인트 JSON 문서 (파라미터는 flatten된 숫자 배열)
    """
    format_version: int
    run_config: RunConfig
    dim: int
    flow_params: List[float]
    ebm_params: List[float]
    flow_opt: AdamDocument
    ebm_opt: AdamDocument
    epoch: int
    pretrain_epoch: int
    iteration: int
    rng: RngDocument
    history: List[IterationRecordDocument]
    diagnostics: Dict[str, MaybeFloat]


# ========== 설정 조합 ==========

def _leaf_paths(model_cls, prefix=()) -> Dict[str, tuple]:
    paths = {}
    for name, info in model_cls.model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            paths.update(_leaf_paths(annotation, prefix + (name,)))
        else:
            paths[name] = prefix + (name,)
    return paths


LEAF_PATHS = _leaf_paths(RunConfig)


def resolve_key(key: str) -> tuple:
    """
    플래그 키를 RunConfig 경로로 변환

    `--n-steps` -> ("coop", "langevin", "n_steps"), `--coop.langevin.step_size` 처럼 경로도 허용

    Raises:
        KeyError: 알 수 없는 키
    """
    key = key.lstrip("-").replace("-", "_")
    if "." in key:
        return tuple(key.split("."))
    if key not in LEAF_PATHS:
        raise KeyError(f"알 수 없는 설정 키입니다: {key}")
    return LEAF_PATHS[key]


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def set_path(doc: Dict[str, Any], path: tuple, value: Any) -> Dict[str, Any]:
    nested: Dict[str, Any] = value
    for part in reversed(path):
        nested = {part: nested}
    return deep_merge(doc, nested)
