from argparse import Namespace
from logging import getLogger
from pathlib import Path
import time

from models import Checkpoint, param_count, preset
from settings import Settings
from templates import format_run_stats, train_summary
from training import DirectorySource, SyntheticSource, TrainConfig, train
from utils import RollingMean
logger = getLogger(__name__)


def run(args: Namespace) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    source = DirectorySource(cfg, args.data) if args.data else SyntheticSource(cfg)
    resume = Checkpoint.load(args.resume) if args.resume else None
    logger.info(f"preset {cfg.preset}: {param_count(preset(cfg.preset)):,} parameters, "
                f"stages {', '.join(str(s) for s in cfg.stages)}")
    if resume is not None:
        logger.info(f"resuming from {args.resume} at step {resume.step}")

    started = time.perf_counter()
    checkpoint = train(cfg, source, Path(args.out), resume=resume, keep=Settings().keep_checkpoints)
    elapsed = time.perf_counter() - started

    smoothed = RollingMean(50)
    for loss in checkpoint.losses:
        smoothed.set(loss)
    done = checkpoint.step - (resume.step if resume else 0)
    print(train_summary.format(steps=checkpoint.step, elapsed=elapsed, rate=done / max(elapsed, 1e-9),
                               final_loss=checkpoint.losses[-1] if checkpoint.losses else float("nan"),
                               smoothed=smoothed.get(), checkpoint=args.out, run_stats=format_run_stats()))
    return 0


def setup(subparsers):
    parser = subparsers.add_parser("train", help="train the inpainting model")
    parser.add_argument("--config", help="key = value training config; built-in desk defaults when omitted")
    parser.add_argument("--data", help="gen-data directory; synthetic videos on the fly when omitted")
    parser.add_argument("--out", required=True, help="final checkpoint path")
    parser.add_argument("--resume", help="checkpoint to continue from")
    parser.set_defaults(handler=run)
