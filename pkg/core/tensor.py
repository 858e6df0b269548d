"""텐서 공통 유틸: 64비트 float 고정, shape/유한성 검사"""
from typing import Optional, Sequence

import numpy as np
import torch

from core.exceptions import DivergenceError, ShapeError

DTYPE = torch.float64


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> torch.Tensor:
    """리스트/ndarray/텐서를 float64 CPU 텐서로 변환"""
    if isinstance(data, torch.Tensor):
        t = data.detach().to(dtype=DTYPE, device="cpu")
    else:
        t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t.contiguous()


def check_batch(x: torch.Tensor, width: int, name: str = "x") -> None:
    """[n, width] 형태의 배치인지 확인"""
    if x.dim() != 2 or x.shape[1] != width:
        raise ShapeError(f"{name}의 shape가 [n, {width}]이어야 합니다. (입력: {list(x.shape)})")


def check_same_shape(a: torch.Tensor, b: torch.Tensor, name: str = "tensor") -> None:
    # broadcast 없음
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{name} shape 불일치: {list(a.shape)} vs {list(b.shape)}")


def check_finite(t: torch.Tensor, name: str = "tensor") -> None:
    if not bool(torch.isfinite(t).all()):
        raise DivergenceError(f"{name}에 NaN/Inf 값이 있습니다.")


def first_bad_row(t: torch.Tensor, limit: float = float("inf")) -> Optional[int]:
    """
    NaN/Inf 이거나 |값| > limit 인 원소가 있는 첫 번째 행 인덱스

    Returns:
        행 인덱스 (문제가 없으면 None)
    """
    bad = ~torch.isfinite(t)
    if limit != float("inf"):
        bad = bad | (t.abs() > limit)
    if t.dim() > 1:
        bad = bad.reshape(t.shape[0], -1).any(dim=1)
    rows = torch.nonzero(bad).flatten()
    if rows.numel() == 0:
        return None
    return int(rows[0])
