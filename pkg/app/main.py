import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))

import argparse
import logging

from app.commands import STAGES, cmd_run_grid
from app.config import load_run_config, settings
from app.errors import ToolkitError
from app.models import StageName
from app.pipeline import RunContext

logger = logging.getLogger("vitsig")

STAGE_CHOICES = [stage.value for stage in StageName] + ["grid", "all"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitsig",
        description="Train a toy ViT, attack it and measure how separable adversarial inputs are by their signatures.",
    )
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory, overrides out_dir")
    parser.add_argument("--stage", choices=STAGE_CHOICES, default="all",
                        help="single stage, 'grid' (attack through report) or 'all'")
    return parser


def run(args: argparse.Namespace):
    config = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    ctx = RunContext.create(config)
    logger.info("Run seed=%d out=%s stage=%s workers=%d", config.seed, config.out_dir, args.stage, ctx.workers)
    if args.stage == "grid":
        return cmd_run_grid(ctx)
    if args.stage == "all":
        for stage in (StageName.GEN_DATA, StageName.TRAIN, StageName.BUILD_REFERENCE):
            STAGES[stage](ctx)
        return cmd_run_grid(ctx)
    return STAGES[StageName(args.stage)](ctx)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except ToolkitError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
