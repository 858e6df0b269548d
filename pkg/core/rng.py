"""
재현 가능한 난수 생성기

numpy PCG64(128비트 상태)를 감싸서 사용함.
- 같은 seed -> 같은 스트림 (같은 구현 내에서 비트 단위 동일)
- 정규분포는 Box-Muller 변환으로 균등분포 스트림에서 생성
- 병렬 체인용 자식 Rng: child_seed = hash(parent_seed, chain_index)
"""
import copy
import math
from typing import Any, Dict

import numpy as np
import torch

from core.exceptions import CheckpointError
from core.tensor import DTYPE

ALGORITHM_ID = "numpy-pcg64"


class Rng:
    """시드 고정 PRNG (체크포인트에 상태 저장 가능)"""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._bitgen = np.random.PCG64(self.seed)
        self._gen = np.random.Generator(self._bitgen)

    @property
    def algorithm_id(self) -> str:
        return ALGORITHM_ID

    def get_state(self) -> Dict[str, Any]:
        """체크포인트용 상태 (JSON 직렬화 가능)"""
        return {
            "algorithm_id": ALGORITHM_ID,
            "seed": self.seed,
            "state": copy.deepcopy(self._bitgen.state),
        }

    @classmethod
    def from_state(cls, doc: Dict[str, Any]) -> "Rng":
        """
        저장된 상태에서 Rng 복원

        Raises:
            CheckpointError: 알고리즘 ID가 다른 경우
        """
        if doc.get("algorithm_id") != ALGORITHM_ID:
            raise CheckpointError(
                f"RNG 알고리즘 불일치: {doc.get('algorithm_id')} (현재 구현: {ALGORITHM_ID})"
            )
        rng = cls(doc["seed"])
        rng._bitgen.state = copy.deepcopy(doc["state"])
        return rng

    def clone(self) -> "Rng":
        return Rng.from_state(self.get_state())

    def spawn(self, index: int) -> "Rng":
        """부모 seed와 체인 인덱스로부터 독립 자식 Rng 생성 (현재 스트림 위치와 무관)"""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(index),))
        child = Rng(0)
        child.seed = int(seq.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))
        child._bitgen = np.random.PCG64(seq)
        child._gen = np.random.Generator(child._bitgen)
        return child

    def random(self, size: int) -> np.ndarray:
        """[0, 1) 균등분포 float64 배열"""
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_sample(rng: Rng, n: int, d: int) -> torch.Tensor:
    """
    표준정규분포 샘플 [n, d] (Box-Muller)

    Args:
        rng: 난수 생성기 (상태가 진행됨)
        n: 샘플 수 (0이면 빈 텐서)
        d: 차원
    """
    if n < 0 or d < 1:
        raise ValueError(f"n >= 0, d >= 1 이어야 합니다. (n={n}, d={d})")
    total = n * d
    if total == 0:
        return torch.zeros((n, d), dtype=DTYPE)

    pairs = (total + 1) // 2
    u = rng.random(2 * pairs).reshape(pairs, 2)
    # 1 - u 는 (0, 1] 이므로 log(0) 없음
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * math.pi * u[:, 1]
    z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1).reshape(-1)
    return torch.from_numpy(z[:total].copy()).reshape(n, d).to(DTYPE)


def uniform_sample(rng: Rng, n: int, d: int, lo: float, hi: float) -> torch.Tensor:
    """
    [lo, hi) 균등분포 샘플 [n, d]

    Raises:
        ValueError: lo >= hi
    """
    if not lo < hi:
        raise ValueError(f"lo < hi 이어야 합니다. (lo={lo}, hi={hi})")
    if n < 0 or d < 1:
        raise ValueError(f"n >= 0, d >= 1 이어야 합니다. (n={n}, d={d})")
    u = rng.random(n * d).reshape(n, d)
    return torch.from_numpy(lo + (hi - lo) * u).to(DTYPE)
