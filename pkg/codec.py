"""
Latent codec: video (H, W, N, 3) <-> latent (H/8, W/8, (N-1)/4+1, 8).

The stand-in codec is a fixed linear transform. Latent frame 0 summarises video
frame 0 alone; latent frame j >= 1 summarises the group of video frames
4(j-1)+1 .. 4j. Per 8x8 block and group:

    channels 0-2   RGB mean (pixels mapped to [-1, 1])
    channels 3-5   RGB mean of consecutive-frame differences in the group (0 for frame 0)
    channel  6     mean horizontal luma difference inside the block
    channel  7     mean vertical luma difference inside the block
"""
from abc import ABC, abstractmethod
import logging

import torch
import torch.nn.functional as F

from utils import ShapeError, ValidationError, format_shape

logger = logging.getLogger(__name__)

SPATIAL = 8
TEMPORAL = 4
LATENT_CHANNELS = 8
MASK_CHANNELS = 4
LUMA = (0.299, 0.587, 0.114)


def latent_shape(height: int, width: int, frames: int) -> tuple[int, int, int]:
    if height % SPATIAL or width % SPATIAL:
        raise ShapeError(f"height and width must be divisible by {SPATIAL}, got {height}x{width}")
    if frames < 1 or frames % TEMPORAL != 1:
        raise ShapeError(f"frame count must be 4k+1, got {frames}")
    return height // SPATIAL, width // SPATIAL, (frames - 1) // TEMPORAL + 1

def video_shape(h: int, w: int, n: int) -> tuple[int, int, int]:
    return SPATIAL * h, SPATIAL * w, TEMPORAL * (n - 1) + 1


def _block_mean(x: torch.Tensor) -> torch.Tensor:
    # (H, W, ...) -> (H/8, W/8, ...)
    H, W = x.shape[:2]
    rest = x.shape[2:]
    return x.reshape(H // SPATIAL, SPATIAL, W // SPATIAL, SPATIAL, *rest).mean(dim=(1, 3))

def _group_mean(x: torch.Tensor) -> torch.Tensor:
    # temporal axis 2: frame 0 alone, then groups of four
    head = x[:, :, :1]
    tail = x[:, :, 1:]
    if tail.shape[2] == 0:
        return head
    grouped = tail.reshape(*tail.shape[:2], tail.shape[2] // TEMPORAL, TEMPORAL, *tail.shape[3:]).mean(dim=3)
    return torch.cat([head, grouped], dim=2)


class LatentCodec(ABC):
    """Interface every codec honours; only the shape contract is fixed."""

    @abstractmethod
    def encode(self, video: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        ...


class WaveletCodec(LatentCodec):
    """
    Deterministic means + differences + gradients codec. Encoding is linear in
    the pixels and bounded in [-2, 2]; decoding is linear until the final clamp.
    """

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        if video.dim() != 4 or video.shape[-1] != 3:
            raise ShapeError(f"encode expects HxWxNx3, got {format_shape(video.shape)}")
        H, W, N, _ = video.shape
        h, w, n = latent_shape(H, W, N)
        p = (video - 0.5) * 2.0

        means = _block_mean(_group_mean(p)) # h, w, n, 3

        diffs = torch.zeros(h, w, n, 3, dtype=p.dtype)
        if n > 1:
            groups = p[:, :, 1:].reshape(H, W, n - 1, TEMPORAL, 3)
            steps = (groups[:, :, :, 1:] - groups[:, :, :, :-1]).mean(dim=3)
            diffs[:, :, 1:] = _block_mean(steps)

        luma = p @ torch.tensor(LUMA, dtype=p.dtype) # H, W, N
        blocks = luma.reshape(h, SPATIAL, w, SPATIAL, N)
        grad_x = (blocks[:, :, :, 1:] - blocks[:, :, :, :-1]).mean(dim=(1, 3)) # h, w, N
        grad_y = (blocks[:, 1:] - blocks[:, :-1]).mean(dim=(1, 3))
        grads = _group_mean(torch.stack([grad_x, grad_y], dim=-1)) # h, w, n, 2

        return torch.cat([means, diffs, grads], dim=-1)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[-1] != LATENT_CHANNELS:
            raise ShapeError(f"decode expects hxwxnx{LATENT_CHANNELS}, got {format_shape(latent.shape)}")
        h, w, n, _ = latent.shape
        means, diffs = latent[..., 0:3], latent[..., 3:6]
        gx, gy = latent[..., 6:7], latent[..., 7:8]

        # extend the block-centre grid by one block per side, each channel along its
        # own slope between neighbouring blocks, so bilinear upsampling never clamps
        # at the frame border. A single block row or column uses the luma gradient.
        step = float(SPATIAL)
        if w > 1:
            left = 2 * means[:, :1] - means[:, 1:2]
            right = 2 * means[:, -1:] - means[:, -2:-1]
        else:
            left, right = means - step * gx, means + step * gx
        padded = torch.cat([left, means, right], dim=1)
        if h > 1:
            top = 2 * padded[:1] - padded[1:2]
            bottom = 2 * padded[-1:] - padded[-2:-1]
        else:
            gy_padded = torch.cat([gy[:, :1], gy, gy[:, -1:]], dim=1)
            top, bottom = padded - step * gy_padded, padded + step * gy_padded
        padded = torch.cat([top, padded, bottom], dim=0)

        planes = padded.permute(2, 3, 0, 1) # n, 3, h+2, w+2
        up = F.interpolate(planes, scale_factor=SPATIAL, mode="bilinear", align_corners=False)
        up = up[:, :, SPATIAL:-SPATIAL, SPATIAL:-SPATIAL].permute(2, 3, 0, 1) # H, W, n, 3

        slope = F.interpolate(diffs.permute(2, 3, 0, 1), scale_factor=SPATIAL, mode="nearest").permute(2, 3, 0, 1)
        frames = [up[:, :, 0]]
        for j in range(1, n):
            for k in range(TEMPORAL):
                frames.append(up[:, :, j] + (k - (TEMPORAL - 1) / 2) * slope[:, :, j])
        p = torch.stack(frames, dim=2)
        return (p / 2.0 + 0.5).clamp(0.0, 1.0)


def downsample_mask(mask: torch.Tensor) -> torch.Tensor:
    """
    Fractional 8x8 coverage per frame, with the four frames of each temporal
    group folded into channels. Latent frame 0 repeats mask frame 0 in all four
    channels.

    Returns:
        torch.Tensor: (h, w, n, 4) in [0, 1].
    """
    if mask.dim() != 4 or mask.shape[-1] != 1:
        raise ShapeError(f"downsample_mask expects HxWxNx1, got {format_shape(mask.shape)}")
    H, W, N, _ = mask.shape
    h, w, n = latent_shape(H, W, N)
    coverage = _block_mean(mask[..., 0]) # h, w, N
    head = coverage[:, :, :1, None].expand(h, w, 1, MASK_CHANNELS)
    tail = coverage[:, :, 1:].reshape(h, w, n - 1, MASK_CHANNELS)
    return torch.cat([head, tail], dim=2)


_codecs = {"wavelet": WaveletCodec}

def get_codec(name: str = "wavelet") -> LatentCodec:
    try:
        return _codecs[name]()
    except KeyError:
        raise ValidationError(f"unknown codec {name!r}, choose from {sorted(_codecs)}") from None

def encode(video: torch.Tensor) -> torch.Tensor:
    return get_codec().encode(video)

def decode(latent: torch.Tensor) -> torch.Tensor:
    return get_codec().decode(latent)
