import os
from dotenv import load_dotenv

load_dotenv()

# 출력 설정
OUT_DIR = os.getenv("COOPFLOW_OUT_DIR", "runs/default")

# 로그 설정
LOG_LEVEL = os.getenv("COOPFLOW_LOG_LEVEL", "INFO")
SHOW_PROGRESS = os.getenv("COOPFLOW_PROGRESS", "true").lower() == "true"

# 재현성: torch intra-op 스레드 수 고정 (스레드 수가 바뀌면 합산 순서가 바뀜)
NUM_THREADS = int(os.getenv("COOPFLOW_NUM_THREADS", "1"))

# 체크포인트 포맷
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_FILE = "ckpt.json"
TRAIN_LOG_FILE = "train_log.csv"
SAMPLES_FILE = "samples.csv"
PARTIAL_SUFFIX = ".partial"
