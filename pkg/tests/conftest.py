import pytest
import torch

from core.rng import Rng
from core.tensor import DTYPE
from services.coopflow import init_state
from services.data_eval import make_spiral
from storage.schemas import ArchSpec, CoopConfig, LangevinConfig

torch.set_num_threads(1)


class QuadraticEnergy:
    """해석적 energy f(x) = -λ‖x‖²/2 (reference가 있으면 -‖x‖²/2 추가)"""

    def __init__(self, dim: int = 2, lam: float = 1.0, reference: bool = False):
        self.dim = dim
        self.lam = lam
        self.reference = reference

    def _coef(self) -> float:
        return self.lam + (1.0 if self.reference else 0.0)

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        return -0.5 * self._coef() * (x * x).sum(dim=1)

    def grad_x(self, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
        return -self._coef() * x


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_arch():
    return ArchSpec(flow_depth=2, flow_hidden=[8], ebm_hidden=[8])


@pytest.fixture
def small_config():
    return CoopConfig(
        epochs=2,
        batch_size=20,
        flow_lr=1e-3,
        ebm_lr=1e-3,
        langevin=LangevinConfig(n_steps=5, step_size=0.05),
    )


@pytest.fixture
def spiral_data():
    return make_spiral(100, 0.05, Rng(0))


@pytest.fixture
def small_state(small_config, small_arch):
    return init_state(small_config, small_arch, 2)


def points(*rows) -> torch.Tensor:
    return torch.tensor(rows, dtype=DTYPE)
