"""
End-to-end inpainting: masked video -> latents -> sliding-window Euler sampling
-> decoded frames, with the original pixels pasted back outside the mask.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union
import logging
import time

import torch
import torch.nn.functional as F

from codec import LATENT_CHANNELS, MASK_CHANNELS, decode, downsample_mask, encode
from flowmatch import SchedulerConfig
from mediaio import apply_mask, read_frames, read_masks, write_frames
from models import Checkpoint, as_velocity_fn, build_model
from multidiffusion import BoundaryJumps, ClipPlan, boundary_jumps, default_stride, long_denoise, plan_clips
from numerics import RngStream
from utils import ValidationError, format_shape

logger = logging.getLogger(__name__)

ALIGN = 16 # codec 8 x patch 2


@dataclass
class InpaintResult:
    video: torch.Tensor # H, W, N, 3 composited output
    latent: torch.Tensor
    plan: ClipPlan
    jumps: BoundaryJumps
    seconds: float


def pad_to_multiple(x: torch.Tensor, multiple: int = ALIGN) -> torch.Tensor:
    """Replicate-pads the H and W axes of an (H, W, N, C) tensor up to `multiple`."""
    H, W = x.shape[:2]
    pad_h, pad_w = -H % multiple, -W % multiple
    if not (pad_h or pad_w):
        return x
    planes = x.permute(2, 3, 0, 1) # N, C, H, W
    planes = F.pad(planes, (0, pad_w, 0, pad_h), mode="replicate")
    return planes.permute(2, 3, 0, 1).contiguous()

def check_compatible(checkpoint: Checkpoint):
    cfg = checkpoint.config
    if cfg.latent_channels != LATENT_CHANNELS or cfg.mask_channels != MASK_CHANNELS:
        raise ValidationError(f"checkpoint expects {cfg.latent_channels} latent / {cfg.mask_channels} mask channels, "
                              f"the codec produces {LATENT_CHANNELS} / {MASK_CHANNELS}")


def inpaint(video: torch.Tensor, mask: torch.Tensor, checkpoint: Checkpoint, steps: int = 4,
            window: Optional[int] = None, stride: Optional[int] = None, seed: int = 0, workers: int = 1) -> InpaintResult:
    """
    Fills the holes of `video`.

    Args:
        video (Tensor): (H, W, N, 3) in [0, 1], N = 4k+1.
        mask (Tensor): (H, W, N, 1), 1 marks a hole.
        checkpoint (Checkpoint): trained model.
        steps (int): Euler steps.
        window (int, optional): clip length in latent frames; the checkpoint's
            training window when omitted.
        stride (int, optional): clip stride; window // 2 when omitted.
        seed (int): noise seed.
        workers (int): threads per denoising step.

    Returns:
        InpaintResult: the composited video plus the plan and boundary statistics.
    """
    if video.dim() != 4 or mask.dim() != 4 or video.shape[:3] != mask.shape[:3]:
        raise ValidationError(f"video {format_shape(video.shape)} and mask {format_shape(mask.shape)} are not aligned")
    check_compatible(checkpoint)
    started = time.perf_counter()
    H, W, N, _ = video.shape

    padded_video, padded_mask = pad_to_multiple(video), pad_to_multiple(mask)
    y = encode(apply_mask(padded_video, padded_mask))
    m = downsample_mask(padded_mask)
    n = y.shape[-2]

    window = window or checkpoint.window or n
    stride = stride or default_stride(window)
    plan = plan_clips(n, window, stride)

    model = checkpoint.build_model().eval()
    latent = long_denoise(as_velocity_fn(model), y, m, SchedulerConfig(num_steps=steps), plan, RngStream(seed), workers)
    generated = decode(latent)[:H, :W]
    output = torch.where(mask > 0.5, generated, video)

    jumps = boundary_jumps(latent, plan)
    logger.info(f"inpainted {H}x{W}x{N} in {steps} steps: {jumps}")
    if jumps.spike:
        logger.warning("latent jump at a clip boundary exceeds every within-clip jump")
    return InpaintResult(output, latent, plan, jumps, time.perf_counter() - started)


def inpaint_dirs(video_dir: Union[str, Path], mask_dir: Union[str, Path], checkpoint_path: Union[str, Path],
                 out_dir: Union[str, Path], **kwargs) -> InpaintResult:
    video = read_frames(video_dir)
    mask = read_masks(mask_dir)
    if video.shape[2] != mask.shape[2]:
        raise ValidationError(f"{video.shape[2]} frames but {mask.shape[2]} masks")
    result = inpaint(video, mask, Checkpoint.load(checkpoint_path), **kwargs)
    write_frames(result.video, out_dir)
    return result


def untrained_baseline(checkpoint: Checkpoint, seed: int = 0) -> Checkpoint:
    """A freshly initialised model with the same config, for before/after comparisons."""
    model = build_model(checkpoint.config, seed=seed)
    return Checkpoint.from_model(model, window=checkpoint.window)
