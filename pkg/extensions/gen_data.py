from argparse import Namespace
from dataclasses import replace
from logging import getLogger
from pathlib import Path
import json

from mediaio import check_video_dims, gen_masks, gen_synthetic_video, write_frames, write_masks
from numerics import RngStream
from templates import gen_data_summary
from training import TrainConfig, draw_mask_spec
from utils import parse_size
logger = getLogger(__name__)


def generate(out: Path, videos: int, frames: int, height: int, width: int, objects: int, seed: int,
             cfg: TrainConfig = TrainConfig()) -> dict:
    """
    Writes DIR/video_%04d/{frames,masks} and DIR/manifest.json. Video i is drawn
    from RngStream(seed).child(i); its mask uses the trainer's mask mix.
    """
    check_video_dims(height, width, frames)
    out.mkdir(parents=True, exist_ok=True)
    root = RngStream(seed)
    entries = []
    for i in range(videos):
        rng = root.child(i)
        name = f"video_{i:04d}"
        video = gen_synthetic_video(rng, height, width, frames, objects)
        spec = draw_mask_spec(cfg, rng)
        write_frames(video, out / name / "frames")
        write_masks(gen_masks(rng, height, width, frames, spec), out / name / "masks")
        entries.append({"name": name, "height": height, "width": width, "frames": frames, "objects": objects,
                        "mask": spec.kind.value})
        logger.debug(f"wrote {name} ({spec.kind.value} mask)")
    manifest = {"seed": seed, "videos": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def run(args: Namespace) -> int:
    height, width = parse_size(args.size)
    cfg = replace(TrainConfig(), moving_ratio=args.moving_ratio, caption_ratio=args.caption_ratio).validate()
    generate(Path(args.out), args.videos, args.frames, height, width, args.objects, args.seed, cfg)
    print(gen_data_summary.format(videos=args.videos, height=height, width=width, frames=args.frames,
                                  objects=args.objects, out=args.out))
    return 0


def setup(subparsers):
    parser = subparsers.add_parser("gen-data", help="write synthetic moving-shape videos with masks")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--videos", type=int, default=8)
    parser.add_argument("--frames", type=int, default=17, help="frames per video, 4k+1")
    parser.add_argument("--size", default="64x64", help="HxW")
    parser.add_argument("--objects", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--moving-ratio", type=float, default=0.5, help="share of moving masks")
    parser.add_argument("--caption-ratio", type=float, default=0.0, help="share of caption masks")
    parser.set_defaults(handler=run)
