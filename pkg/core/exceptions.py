from typing import Any, Optional


class CoopFlowError(Exception):
    """coopflow 패키지 공통 예외"""


class ShapeError(CoopFlowError, ValueError):
    """텐서 shape 불일치"""


class ConfigError(CoopFlowError, ValueError):
    """실행 설정 오류 (CLI 종료 코드 2)"""


class CheckpointError(CoopFlowError):
    """체크포인트 누락/손상/불일치 (CLI 종료 코드 3)"""


class DivergenceError(CoopFlowError):
    """
    수치 발산 (CLI 종료 코드 4)

    Args:
        message: 진단 메시지
        step: 발산이 감지된 Langevin 스텝 (1부터 시작, 없으면 None)
        chain: 문제가 된 체인(행) 인덱스
        state: 학습 중 발산한 경우 마지막 정상 CoopState
    """

    def __init__(
        self,
        message: str,
        step: Optional[int] = None,
        chain: Optional[int] = None,
        state: Any = None,
    ):
        super().__init__(message)
        self.step = step
        self.chain = chain
        self.state = state
