"""
2D 합성 데이터셋, 두 표본 지표(MMD), 밀도 그리드(Z(θ) 그리드 추정 포함)
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Literal, Optional, Tuple, Union

import numpy as np
import torch

from core.exceptions import DivergenceError
from core.rng import Rng, gaussian_sample, uniform_sample
from core.tensor import DTYPE, as_tensor, check_batch
from services.langevin_flow import EbmModel
from services.normflow import FlowModel, flow_logprob

logger = logging.getLogger(__name__)

Bounds = Tuple[float, float]

SPIRAL_SCALE = 0.9
SPIRAL_TURNS = 3.0 * math.pi
DEFAULT_BOUNDS: Bounds = (-1.5, 1.5)

EIGHT_GAUSSIANS_RADIUS = 0.8
EIGHT_GAUSSIANS_SIGMA = 0.05
TWO_RINGS_RADII = (0.4, 0.8)
TWO_RINGS_SIGMA = 0.02
CHECKERBOARD_CELLS = 4


@dataclass
class Dataset2D:
    """2D 점 집합 + 생성기 정보"""

    points: torch.Tensor
    generator_id: str
    generator_params: Dict[str, Any] = field(default_factory=dict)
    bounds: Bounds = DEFAULT_BOUNDS

    def __post_init__(self):
        check_batch(self.points, 2, "points")
        if self.points.shape[0] < 1:
            raise ValueError("데이터셋은 최소 1개의 점이 필요합니다.")
        lo, hi = self.bounds
        if bool((self.points < lo).any()) or bool((self.points > hi).any()):
            raise ValueError(f"데이터셋 점이 범위 [{lo}, {hi}]² 를 벗어났습니다.")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class DensityGrid:
    """
    G×G 밀도 그리드 (values[iy, ix], 셀 중심 기준)
    - kind = flow: 정확한 log-density
    - kind = ebm: 그리드 정규화 밀도 (셀 면적 가중합 = 1), normalizer = Z(θ) 그리드 추정
    """

    bounds: Bounds
    resolution: int
    values: torch.Tensor
    kind: Literal["flow", "ebm"]
    normalizer: Optional[float] = None
    log_normalizer: Optional[float] = None

    @property
    def cell_area(self) -> float:
        h = (self.bounds[1] - self.bounds[0]) / self.resolution
        return h * h

    def mass(self) -> torch.Tensor:
        """셀별 확률 질량 (합 = 1)"""
        if self.kind == "ebm":
            mass = self.values * self.cell_area
        else:
            mass = torch.exp(self.values - self.values.max())
        return mass / mass.sum()


def _fit_bounds(points: torch.Tensor, bounds: Bounds) -> Bounds:
    # 노이즈 꼬리가 기본 범위를 넘으면 0.5 단위로 넓힘
    reach = float(points.abs().max()) if points.numel() else 0.0
    if reach <= bounds[1] and -reach >= bounds[0]:
        return bounds
    b = math.ceil(reach * 2.0) / 2.0
    return (min(bounds[0], -b), max(bounds[1], b))


def spiral_curve(t: torch.Tensor, scale: float = SPIRAL_SCALE) -> torch.Tensor:
    """잡음 없는 나선 위의 점 (t/3π)(cos t, sin t) · scale"""
    r = scale * t / SPIRAL_TURNS
    return torch.stack([r * torch.cos(t), r * torch.sin(t)], dim=1)


def make_spiral(n: int, noise_sigma: float, rng: Rng, scale: float = SPIRAL_SCALE) -> Dataset2D:
    """
    나선 데이터셋

    u ~ U[0,1), t = 3π√u, 점 = (t/3π)(cos t, sin t)·scale + σ·ε

    Args:
        n: 점 개수 (>= 1)
        noise_sigma: 가우시안 노이즈 표준편차 (>= 0)
        rng: 난수 생성기 (u 다음 ε 순서로 소비)
    """
    if n < 1:
        raise ValueError("n >= 1 이어야 합니다.")
    if noise_sigma < 0:
        raise ValueError("noise_sigma >= 0 이어야 합니다.")
    u = uniform_sample(rng, n, 1, 0.0, 1.0)[:, 0]
    t = SPIRAL_TURNS * torch.sqrt(u)
    eps = gaussian_sample(rng, n, 2)
    points = spiral_curve(t, scale) + noise_sigma * eps
    return Dataset2D(
        points=points,
        generator_id="spiral",
        generator_params={"n": n, "noise_sigma": noise_sigma, "scale": scale},
        bounds=_fit_bounds(points, DEFAULT_BOUNDS),
    )


def spiral_distance(points: torch.Tensor, scale: float = SPIRAL_SCALE, resolution: int = 20000) -> torch.Tensor:
    """각 점에서 잡음 없는 나선 곡선까지의 최소 거리 (조밀한 곡선 샘플 기준)"""
    t = torch.linspace(0.0, SPIRAL_TURNS, resolution, dtype=DTYPE)
    curve = spiral_curve(t, scale)
    return torch.cdist(as_tensor(points), curve).min(dim=1).values


def make_auxiliary(
    kind: Literal["eight-gaussians", "two-rings", "checkerboard"],
    n: int,
    rng: Rng,
) -> Dataset2D:
    """
    보조 2D toy 데이터셋
    - eight-gaussians: 반지름 0.8 원 위 45° 간격 중심, σ=0.05
    - two-rings: 반지름 {0.4, 0.8}, 반지름 방향 σ=0.02
    - checkerboard: [-1, 1]² 를 4×4로 나눈 체커보드의 검은 칸 균등분포
    """
    if n < 1:
        raise ValueError("n >= 1 이어야 합니다.")

    if kind == "eight-gaussians":
        idx = torch.from_numpy(rng.random(n)).mul(8).floor()
        angle = idx * (math.pi / 4.0)
        centers = EIGHT_GAUSSIANS_RADIUS * torch.stack([torch.cos(angle), torch.sin(angle)], dim=1)
        points = centers + EIGHT_GAUSSIANS_SIGMA * gaussian_sample(rng, n, 2)
        params = {"radius": EIGHT_GAUSSIANS_RADIUS, "sigma": EIGHT_GAUSSIANS_SIGMA}
    elif kind == "two-rings":
        ring = torch.from_numpy(rng.random(n)).lt(0.5).to(DTYPE)
        radius = TWO_RINGS_RADII[0] * ring + TWO_RINGS_RADII[1] * (1.0 - ring)
        angle = uniform_sample(rng, n, 1, 0.0, 2.0 * math.pi)[:, 0]
        radius = radius + TWO_RINGS_SIGMA * gaussian_sample(rng, n, 1)[:, 0]
        points = torch.stack([radius * torch.cos(angle), radius * torch.sin(angle)], dim=1)
        params = {"radii": list(TWO_RINGS_RADII), "sigma": TWO_RINGS_SIGMA}
    elif kind == "checkerboard":
        k = CHECKERBOARD_CELLS
        cell = 2.0 / k
        col = torch.from_numpy(rng.random(n)).mul(k).floor()
        row_half = torch.from_numpy(rng.random(n)).mul(k // 2).floor()
        # (row + col) 짝수 칸만 사용
        row = 2.0 * row_half + torch.remainder(col, 2.0)
        offset = uniform_sample(rng, n, 2, 0.0, cell)
        points = torch.stack([-1.0 + col * cell, -1.0 + row * cell], dim=1) + offset
        params = {"cells": k}
    else:
        raise ValueError(f"알 수 없는 데이터셋 종류: {kind}")

    points = points.to(DTYPE)
    return Dataset2D(points, kind, params, _fit_bounds(points, DEFAULT_BOUNDS))


def make_dataset(generator: str, n: int, noise_sigma: float, rng: Rng) -> Dataset2D:
    """설정의 generator 이름으로 데이터셋 생성"""
    if generator == "spiral":
        return make_spiral(n, noise_sigma, rng)
    return make_auxiliary(generator, n, rng)


# ========== 두 표본 지표 ==========

def _sorted_sum(values: torch.Tensor) -> float:
    # 원소 순서와 무관한 합 (mmd(X, Y) == mmd(Y, X) 를 비트 단위로 보장)
    return float(torch.sort(values.reshape(-1)).values.sum())


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(dim=2)


def median_bandwidth(x: torch.Tensor, y: torch.Tensor) -> float:
    """X ∪ Y 의 쌍별 거리 중앙값"""
    z = torch.cat([x, y], dim=0)
    dists = torch.pdist(z)
    return float(np.median(dists.numpy()))


def mmd_rbf(x: torch.Tensor, y: torch.Tensor, bandwidth: Union[float, str] = 0.5) -> float:
    """
    가우시안 커널 unbiased MMD

    a == b 인 경우 교차항도 대각을 제외한 U-통계량을 사용하므로 X == Y 이면 정확히 0.

    Args:
        x: [a, D], y: [b, D] (a, b >= 2)
        bandwidth: 고정 σ 또는 "median"

    Returns:
        sqrt(max(MMD², 0))
    """
    x, y = as_tensor(x), as_tensor(y)
    a, b = x.shape[0], y.shape[0]
    if a < 2 or b < 2:
        raise ValueError(f"MMD 계산에는 각 집합당 2개 이상의 표본이 필요합니다. (a={a}, b={b})")
    if x.shape[1] != y.shape[1]:
        raise ValueError("X, Y 의 차원이 다릅니다.")

    sigma = median_bandwidth(x, y) if bandwidth == "median" else float(bandwidth)
    if sigma <= 0:
        raise ValueError("bandwidth는 양수여야 합니다.")
    gamma = 1.0 / (2.0 * sigma * sigma)

    k_xx = torch.exp(-gamma * _sq_dists(x, x))
    k_yy = torch.exp(-gamma * _sq_dists(y, y))
    k_xy = torch.exp(-gamma * _sq_dists(x, y))

    off_x = ~torch.eye(a, dtype=torch.bool)
    off_y = ~torch.eye(b, dtype=torch.bool)
    term_x = _sorted_sum(k_xx[off_x]) / (a * (a - 1))
    term_y = _sorted_sum(k_yy[off_y]) / (b * (b - 1))
    if a == b:
        cross = _sorted_sum(k_xy[off_x]) / (a * (a - 1))
    else:
        cross = _sorted_sum(k_xy) / (a * b)
    mmd2 = (term_x + term_y) - 2.0 * cross
    return math.sqrt(max(mmd2, 0.0))


# ========== 그리드 ==========

def grid_centers(bounds: Bounds, resolution: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    셀 중심 좌표

    Returns:
        (points [G*G, 2] (iy 행 우선), 1D 중심 좌표 [G])
    """
    lo, hi = bounds
    h = (hi - lo) / resolution
    axis = lo + (torch.arange(resolution, dtype=DTYPE) + 0.5) * h
    yy, xx = torch.meshgrid(axis, axis, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1), axis


def histogram_mass(points: torch.Tensor, bounds: Bounds, resolution: int, smoothing: float = 1e-6) -> torch.Tensor:
    """표본 히스토그램 (셀당 smoothing 질량을 더한 뒤 정규화) [G, G] (iy, ix)"""
    pts = as_tensor(points).numpy()
    edges = np.linspace(bounds[0], bounds[1], resolution + 1)
    counts, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=[edges, edges])
    mass = counts / max(len(pts), 1) + smoothing
    return torch.from_numpy(mass / mass.sum()).to(DTYPE)


GridInput = Union[Dataset2D, DensityGrid, torch.Tensor]


def _grid_mass(p: GridInput, bounds: Bounds, resolution: int, smoothing: float) -> torch.Tensor:
    if isinstance(p, DensityGrid):
        if tuple(p.bounds) != tuple(bounds) or p.resolution != resolution:
            raise ValueError(
                f"그리드 범위/해상도 불일치: {p.bounds}/{p.resolution} vs {bounds}/{resolution}"
            )
        # 정확한 밀도 그리드는 smoothing 없이 그대로
        return p.mass()
    points = p.points if isinstance(p, Dataset2D) else p
    return histogram_mass(points, bounds, resolution, smoothing)


def _common_bounds(p: GridInput, q: GridInput) -> Bounds:
    declared = [tuple(x.bounds) for x in (p, q) if isinstance(x, (Dataset2D, DensityGrid))]
    if not declared:
        return DEFAULT_BOUNDS
    if any(b != declared[0] for b in declared):
        raise ValueError(f"두 입력의 범위가 다릅니다: {declared}")
    return declared[0]


def grid_kl(
    p: GridInput,
    q: GridInput,
    resolution: int = 100,
    smoothing: float = 1e-6,
    bounds: Optional[Bounds] = None,
) -> float:
    """
    G×G 그리드 위의 KL(P‖Q)

    표본(Dataset2D 또는 [n, 2] 텐서)은 smoothing을 더한 히스토그램으로, 밀도 그리드는 그대로 사용.

    Raises:
        ValueError: 범위 불일치 또는 G < 16
    """
    if resolution < 16:
        raise ValueError("grid_kl 해상도는 16 이상이어야 합니다.")
    if bounds is None:
        bounds = _common_bounds(p, q)
    pm = _grid_mass(p, bounds, resolution, smoothing)
    qm = _grid_mass(q, bounds, resolution, smoothing)
    positive = pm > 0
    kl = float((pm[positive] * (torch.log(pm[positive]) - torch.log(qm[positive]))).sum())
    return max(kl, 0.0)


def density_grid(model: Union[FlowModel, EbmModel], bounds: Bounds, resolution: int) -> DensityGrid:
    """
    모델 밀도 래스터
    - flow: 셀 중심의 정확한 log q_α
    - EBM: exp(f) 를 셀 중심 × 셀 면적 Riemann 합으로 정규화, 정규화 상수를 Z(θ) 추정으로 기록

    Raises:
        DivergenceError: 그리드 위 energy가 유한하지 않은 경우
    """
    if resolution < 2:
        raise ValueError("해상도는 2 이상이어야 합니다.")
    points, _ = grid_centers(bounds, resolution)
    grid = DensityGrid(bounds=tuple(bounds), resolution=resolution, values=torch.empty(0), kind="flow")

    with torch.no_grad():
        if isinstance(model, FlowModel):
            values = flow_logprob(model, points).reshape(resolution, resolution)
            grid.values = values
            return grid

        f = model.energy(points)
    if not bool(torch.isfinite(f).all()):
        raise DivergenceError("밀도 그리드에서 energy가 유한하지 않습니다.")
    f_max = float(f.max())
    weights = torch.exp(f - f_max)
    total = float(weights.sum()) * grid.cell_area
    log_z = f_max + math.log(total)
    grid.kind = "ebm"
    grid.values = (weights / total).reshape(resolution, resolution)
    grid.log_normalizer = log_z
    grid.normalizer = math.exp(log_z) if log_z < 700 else float("inf")
    return grid
