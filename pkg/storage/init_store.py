import logging
from pathlib import Path

from config.settings import OUT_DIR, PARTIAL_SUFFIX

logger = logging.getLogger(__name__)


def init_output_dir(out_dir=None, clean: bool = False) -> Path:
    """
    출력 디렉토리 초기화
    - 없으면 생성, 이미 있으면 그대로 사용
    - clean 이면 이전 실행이 남긴 .partial 파일과 임시 파일 정리 (새 학습 시작 시에만)

    Args:
        out_dir: 출력 디렉토리 (없으면 COOPFLOW_OUT_DIR)
        clean: 부분 출력 삭제 여부

    Returns:
        출력 디렉토리 경로
    """
    path = Path(out_dir or OUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    if clean:
        stale = list(path.glob(f"*{PARTIAL_SUFFIX}")) + list(path.glob("*.tmp"))
        for file in stale:
            file.unlink()
        if stale:
            logger.info(f"[CKPT] 이전 부분 출력 정리 - files: {len(stale)}")
    logger.info(f"✅ 출력 디렉토리 준비 완료 - path: {path}")
    return path
