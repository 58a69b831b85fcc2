from argparse import Namespace
from logging import getLogger

from inference import inpaint_dirs
from templates import format_run_stats, inpaint_summary
logger = getLogger(__name__)


def run(args: Namespace) -> int:
    result = inpaint_dirs(args.video, args.mask, args.ckpt, args.out, steps=args.steps, window=args.window,
                          stride=args.stride, seed=args.seed, workers=args.workers)
    H, W, N, _ = result.video.shape
    print(inpaint_summary.format(frames=N, height=H, width=W, elapsed=result.seconds, plan=result.plan,
                                 jumps=result.jumps, out=args.out, run_stats=format_run_stats()))
    return 0


def setup(subparsers):
    parser = subparsers.add_parser("inpaint", help="fill masked regions of a frame directory")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--video", required=True, help="directory of frame_%%05d.ppm")
    parser.add_argument("--mask", required=True, help="directory of mask_%%05d.pgm")
    parser.add_argument("--out", required=True)
    parser.add_argument("--steps", type=int, default=4)
    parser.add_argument("--window", type=int, help="clip length in latent frames (default: training window)")
    parser.add_argument("--stride", type=int, help="clip stride in latent frames (default: window // 2)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1, help="threads evaluating clips of one step")
    parser.set_defaults(handler=run)
