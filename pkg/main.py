import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

import torch
from pydantic import ValidationError

from config.settings import LOG_LEVEL, NUM_THREADS, OUT_DIR, SHOW_PROGRESS
from core.exceptions import CheckpointError, ConfigError, DivergenceError
from services.run_service import RunService, build_run_config
from storage.checkpoint_manager import read_points, to_json

logger = logging.getLogger("coopflow")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGENCE = 4


class _Parser(argparse.ArgumentParser):
    """인자 오류도 JSON 한 줄 에러로 보고하기 위해 예외로 바꿈"""

    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"숫자 목록이 아닙니다: {text}") from e


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """
    `--key value` / `--key=value` 목록을 {key: value} 로 변환 (값은 가능하면 JSON)

    Raises:
        ConfigError: 값이 없는 플래그 또는 `--` 로 시작하지 않는 토큰
    """
    overrides: Dict[str, Any] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"알 수 없는 인자입니다: {token}")
        if "=" in token:
            key, value = token[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"플래그 값이 없습니다: {token}")
            key, value = token[2:], tokens[i + 1]
            i += 2
        overrides[key] = _parse_value(value)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coopflow", description="CoopFlow 2D 학습/평가 CLI", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, allow_abbrev=False)
        p.add_argument("--out", default=OUT_DIR, help="출력 디렉토리")
        p.add_argument("--seed", type=int, default=0, help="난수 seed")
        p.add_argument("--checkpoint", default=None, help="체크포인트 경로 (기본: <out>/ckpt.json)")
        return p

    train = sub.add_parser("train", help="CoopFlow 학습 (나머지 --key value 는 설정 덮어쓰기)", allow_abbrev=False)
    train.add_argument("--out", default=None, help="출력 디렉토리")
    train.add_argument("--preset", default=None)
    train.add_argument("--config", default=None, help="JSON config 파일")
    train.add_argument("--resume", action="store_true", help="<out>/ckpt.json 에서 이어서 학습")
    train.add_argument("--no-progress", action="store_true")

    p = command("sample", "flow(x̂) / CoopFlow(x̃) 샘플 CSV")
    p.add_argument("--n", type=int, default=2000)

    p = command("density", "flow / EBM 밀도 PPM 래스터")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--bound", type=float, default=None)

    p = command("reconstruct", "held-out 점(또는 CSV 점) 복원")
    p.add_argument("--points", default=None, help="x0,x1 헤더 CSV")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--backtracking", action="store_true")

    p = command("inpaint", "마스크 좌표를 고정한 복원")
    p.add_argument("--x", required=True, help="예: 0.5,0")
    p.add_argument("--mask", required=True, help="예: 1,0")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--snapshots", type=int, default=5)
    p.add_argument("--completions", type=int, default=1)

    p = command("interpolate", "잠재공간 선형 보간")
    p.add_argument("--xa", required=True)
    p.add_argument("--xb", required=True)
    p.add_argument("--num", type=int, default=8)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)

    p = command("eval", "held-out 데이터 대비 MMD / grid KL / moment gap")
    p.add_argument("--flow-samples", default=None)
    p.add_argument("--coop-samples", default=None)

    p = command("sweep", "테스트 시 Langevin 스텝 수 / 스텝 크기 배율 sweep")
    p.add_argument("--step-counts", default="10,50,100,200")
    p.add_argument("--step-ratios", default="0.5,1,1.3333333333333333,2")
    return parser


# ========== 명령 ==========

def cmd_train(args, overrides: Dict[str, Any]) -> int:
    run_config = build_run_config(args.preset, args.config, overrides)
    out_dir = args.out or run_config.out_dir or OUT_DIR
    service = RunService(out_dir)
    service.train(run_config, resume=args.resume, progress=SHOW_PROGRESS and not args.no_progress)
    return EXIT_OK


def _service_and_state(args):
    service = RunService(args.out)
    state, run_config = service.load(args.checkpoint)
    return service, state, run_config


def cmd_sample(args) -> int:
    service, state, _ = _service_and_state(args)
    service.sample(state, args.n, args.seed)
    return EXIT_OK


def cmd_density(args) -> int:
    service, state, run_config = _service_and_state(args)
    service.density(state, run_config, args.resolution, args.bound)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    service, state, run_config = _service_and_state(args)
    points = read_points(args.points) if args.points else None
    service.reconstruct(state, run_config, points, args.n, args.steps, args.lr, args.seed, args.backtracking)
    return EXIT_OK


def cmd_inpaint(args) -> int:
    service, state, _ = _service_and_state(args)
    service.inpaint(state, _floats(args.x), _floats(args.mask), args.steps, args.lr, args.seed, args.snapshots, args.completions)
    return EXIT_OK


def cmd_interpolate(args) -> int:
    service, state, _ = _service_and_state(args)
    service.interpolate(state, _floats(args.xa), _floats(args.xb), args.num, args.steps, args.lr, args.seed)
    return EXIT_OK


def cmd_eval(args) -> int:
    service, state, run_config = _service_and_state(args)
    report = service.evaluate(state, run_config, args.seed, args.flow_samples, args.coop_samples)
    print(to_json(report))
    return EXIT_OK


def cmd_sweep(args) -> int:
    service, state, run_config = _service_and_state(args)
    counts = [int(v) for v in _floats(args.step_counts)]
    service.sweep(state, run_config, counts, _floats(args.step_ratios), args.seed)
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "density": cmd_density,
    "reconstruct": cmd_reconstruct,
    "inpaint": cmd_inpaint,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def _report_error(kind: str, code: int, message: str) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}, ensure_ascii=False), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    CLI 진입점

    Returns:
        종료 코드 (0 성공, 2 설정 오류, 3 체크포인트 오류, 4 수치 발산, 1 기타)
    """
    logging.basicConfig(
        level=LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    torch.set_num_threads(NUM_THREADS)
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        if argv and argv[0] == "train":
            args, rest = parser.parse_known_args(argv)
            return cmd_train(args, parse_overrides(rest))
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except CheckpointError as e:
        return _report_error("checkpoint", EXIT_CHECKPOINT, str(e))
    except DivergenceError as e:
        return _report_error("divergence", EXIT_DIVERGENCE, str(e))
    except (ConfigError, ValidationError, ValueError) as e:
        # 인자/설정 전제조건 위반 (ShapeError 포함)
        return _report_error("config", EXIT_CONFIG, str(e))
    except Exception as e:
        logger.exception("❌ 처리되지 않은 오류")
        return _report_error("internal", EXIT_OTHER, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
