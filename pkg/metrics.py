"""
PSNR / SSIM scoring of inpainted videos against ground truth.

Both metrics take (H, W, N, 3) tensors in [0, 1]. PSNR uses the MSE over all
pixels (or only the hole pixels when a region is given) and is capped at 99 dB.
SSIM is the Gaussian-windowed variant (11x11, sigma 1.5, K1 0.01, K2 0.03)
computed per frame on the RGB channels, averaged over channels then frames.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union
import json
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from pandas import DataFrame, ExcelWriter
from skimage.metrics import structural_similarity

from mediaio import read_frames, read_masks
from utils import ValidationError, check_same_shape

logger = logging.getLogger(__name__)

MAX_PSNR = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(pred: torch.Tensor, gt: torch.Tensor, region: Optional[torch.Tensor] = None) -> float:
    """
    10 * log10(1 / MSE), capped at MAX_PSNR.

    Args:
        pred (Tensor): (H, W, N, 3) prediction.
        gt (Tensor): ground truth of the same shape.
        region (Tensor, optional): (H, W, N, 1) mask; only pixels where it is
            above 0.5 are scored.
    """
    check_same_shape("psnr", pred, gt)
    error = (pred.to(torch.float64) - gt.to(torch.float64)) ** 2
    if region is not None:
        if region.shape[:3] != pred.shape[:3]:
            raise ValidationError(f"psnr region {tuple(region.shape)} does not cover {tuple(pred.shape)}")
        selected = (region > 0.5).expand_as(error)
        if not selected.any():
            logger.warning("psnr region is empty, reporting the cap")
            return MAX_PSNR
        error = error[selected]
    mse = error.mean().item()
    if mse == 0:
        return MAX_PSNR
    return min(MAX_PSNR, 10 * math.log10(1.0 / mse))


def ssim(pred: torch.Tensor, gt: torch.Tensor) -> float:
    check_same_shape("ssim", pred, gt)
    H, W, N, _ = pred.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValidationError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")
    a = pred.detach().to(torch.float64).cpu().numpy()
    b = gt.detach().to(torch.float64).cpu().numpy()
    scores = [
        structural_similarity(a[:, :, i], b[:, :, i], data_range=1.0, channel_axis=-1, gaussian_weights=True,
                              sigma=SSIM_SIGMA, use_sample_covariance=False)
        for i in range(N)
    ]
    return float(np.mean(scores))


def resize_video(video: torch.Tensor, width: int, height: int) -> torch.Tensor:
    planes = video.permute(2, 3, 0, 1) # N, C, H, W
    planes = F.interpolate(planes, size=(height, width), mode="bilinear", align_corners=False)
    return planes.permute(2, 3, 0, 1).clamp(0.0, 1.0).contiguous()


@dataclass
class VideoScore:
    name: str
    psnr: float
    ssim: float
    masked_psnr: Optional[float] = None

@dataclass
class EvalReport:
    videos: list[VideoScore]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([v.psnr for v in self.videos]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([v.ssim for v in self.videos]))

    @property
    def mean_masked_psnr(self) -> Optional[float]:
        values = [v.masked_psnr for v in self.videos if v.masked_psnr is not None]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict:
        return {
            "videos": [asdict(v) for v in self.videos],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim, "masked_psnr": self.mean_masked_psnr},
        }

    def save_json(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def save_xlsx(self, path: Union[str, Path]):
        with ExcelWriter(path) as writer:
            DataFrame([asdict(v) for v in self.videos]).to_excel(writer, sheet_name="videos", index=False)
            DataFrame([self.to_dict()["mean"]]).to_excel(writer, sheet_name="mean", index=False)


def _video_dirs(root: Path, leaf: str) -> dict[str, Path]:
    """
    Maps video names to the directory holding their files. A directory of
    frame/mask files is one video; otherwise every subdirectory is one, using
    its `leaf` child (frames/ or masks/) when present.
    """
    if not root.is_dir():
        raise ValidationError(f"{root} is not a directory")
    if any(p.suffix in (".ppm", ".pgm") for p in root.iterdir()):
        return {root.name: root}
    found = {}
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        found[sub.name] = sub / leaf if (sub / leaf).is_dir() else sub
    if not found:
        raise ValidationError(f"{root} holds no videos")
    return found


def evaluate(pred_dir: Union[str, Path], gt_dir: Union[str, Path], resize: Optional[tuple[int, int]] = None,
             mask_dir: Optional[Union[str, Path]] = None, workers: int = 1) -> EvalReport:
    """
    Scores every predicted video against the ground-truth video of the same name.

    Args:
        resize (tuple[int, int], optional): (width, height) both sets are resized to first.
        mask_dir (str | Path, optional): masks aligned with the ground truth; adds masked PSNR.
        workers (int): videos scored concurrently.

    Raises:
        ValidationError: when the two sets do not name the same videos or shapes differ.
    """
    preds = _video_dirs(Path(pred_dir), "frames")
    gts = _video_dirs(Path(gt_dir), "frames")
    if len(preds) == 1 and len(gts) == 1:
        # single videos are matched regardless of directory name
        gts = {next(iter(preds)): next(iter(gts.values()))}
    masks = None
    if mask_dir is not None:
        masks = _video_dirs(Path(mask_dir), "masks")
        if len(masks) == 1 and len(preds) == 1:
            masks = {next(iter(preds)): next(iter(masks.values()))}
    if set(preds) != set(gts) or (masks is not None and set(masks) != set(gts)):
        raise ValidationError(f"prediction and ground-truth sets are misaligned: {sorted(set(preds) ^ set(gts))}")

    def score(name: str) -> VideoScore:
        pred, gt = read_frames(preds[name]), read_frames(gts[name])
        if pred.shape != gt.shape:
            raise ValidationError(f"{name}: prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
        mask = read_masks(masks[name]) if masks is not None else None
        if resize is not None:
            pred, gt = resize_video(pred, *resize), resize_video(gt, *resize)
            if mask is not None:
                mask = (resize_video(mask, *resize) > 0.5).to(pred.dtype)
        result = VideoScore(name, psnr(pred, gt), ssim(pred, gt))
        if mask is not None:
            result.masked_psnr = psnr(pred, gt, region=mask)
        logger.debug(f"{name}: psnr {result.psnr:.3f} ssim {result.ssim:.4f}")
        return result

    names = sorted(preds)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            videos = list(pool.map(score, names))
    else:
        videos = [score(name) for name in names]
    report = EvalReport(videos)
    logger.info(f"evaluated {len(videos)} video(s): psnr {report.mean_psnr:.3f} ssim {report.mean_ssim:.4f}")
    return report
