"""
학습 preset (RunConfig 부분 문서)

spiral-t100 / t500 / t2000 은 Langevin 스텝 수만 다른 나선 실험,
spiral-pre 는 flow 사전학습 + 웜업, 나머지 둘은 비교용 baseline.
toy 스케일이라 lr은 1e-3 사용.
"""
from typing import Any, Dict

from core.exceptions import ConfigError

_SPIRAL_BASE: Dict[str, Any] = {
    "dataset": {"generator": "spiral", "n_points": 10000, "noise_sigma": 0.05},
    "coop": {
        "epochs": 100,
        "batch_size": 200,
        "flow_lr": 1e-3,
        "ebm_lr": 1e-3,
        "langevin": {"n_steps": 100, "step_size": 0.03, "noise_mode": "full"},
    },
}


def _spiral(**coop: Any) -> Dict[str, Any]:
    langevin = {**_SPIRAL_BASE["coop"]["langevin"], **coop.pop("langevin", {})}
    return {
        "dataset": dict(_SPIRAL_BASE["dataset"]),
        "coop": {**_SPIRAL_BASE["coop"], **coop, "langevin": langevin},
    }


PRESETS: Dict[str, Dict[str, Any]] = {
    "spiral-t100": _spiral(),
    "spiral-t500": _spiral(langevin={"n_steps": 500}),
    "spiral-t2000": _spiral(langevin={"n_steps": 2000}),
    "spiral-pre": _spiral(mode="pretrained", pretrain_epochs=20, warmup_epochs=5),
    "spiral-flow-only": _spiral(mode="flow-only"),
    "spiral-srebm": _spiral(mode="short-run-ebm", shortrun_init="uniform"),
}


def get_preset(name: str) -> Dict[str, Any]:
    """
    preset 문서 조회

    Raises:
        ConfigError: 알 수 없는 preset
    """
    if name not in PRESETS:
        raise ConfigError(f"알 수 없는 preset입니다: {name} (사용 가능: {', '.join(sorted(PRESETS))})")
    return {**PRESETS[name], "preset": name}
