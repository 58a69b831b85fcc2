import json
import math

import pandas as pd
import pytest
import torch

from mediaio import write_frames, write_masks
from metrics import MAX_PSNR, EvalReport, VideoScore, evaluate, psnr, resize_video, ssim
from numerics import RngStream
from utils import ShapeError, ValidationError


def _noise(seed, shape=(16, 16, 5, 3)):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=generator, dtype=torch.float64)


def test_psnr_values():
    x = torch.zeros(4, 4, 1, 3, dtype=torch.float64)
    assert psnr(x, x) == MAX_PSNR
    assert psnr(x, x + 0.5) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeError):
        psnr(x, torch.zeros(4, 4, 2, 3))


def test_psnr_over_a_region():
    gt = torch.zeros(4, 4, 1, 3, dtype=torch.float64)
    pred = gt.clone()
    pred[:2] = 0.1
    region = torch.zeros(4, 4, 1, 1)
    region[:2] = 1
    assert psnr(pred, gt, region) == pytest.approx(20.0, abs=1e-9)
    assert psnr(pred, gt) == pytest.approx(20.0 + 10 * math.log10(2), abs=1e-9)
    assert psnr(pred, gt, torch.zeros(4, 4, 1, 1)) == MAX_PSNR


def test_ssim_identity_and_opposites():
    x = _noise(0)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
    assert ssim(1 - x, x) < 0.5
    assert ssim(torch.roll(x, shifts=2, dims=1), x) < 1.0
    assert ssim((x + 0.1).clamp(0, 1), x) < 1.0


def test_psnr_falls_as_noise_grows():
    gt = _noise(1) * 0.5 + 0.25
    scores = [psnr((gt + a * (_noise(2) - 0.5)).clamp(0, 1), gt) for a in (0.01, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_ssim_needs_full_windows():
    x = torch.rand(8, 8, 1, 3)
    with pytest.raises(ValidationError):
        ssim(x, x)


def test_resize_video():
    video = torch.full((16, 16, 5, 3), 0.25)
    resized = resize_video(video, width=32, height=24)
    assert tuple(resized.shape) == (24, 32, 5, 3)
    assert torch.allclose(resized, torch.full_like(resized, 0.25))


def test_report_means():
    report = EvalReport([VideoScore("a", 20.0, 0.8), VideoScore("b", 30.0, 0.6, masked_psnr=15.0)])
    assert report.mean_psnr == 25.0
    assert report.mean_ssim == pytest.approx(0.7)
    assert report.mean_masked_psnr == 15.0
    assert report.to_dict()["mean"]["psnr"] == 25.0


def _write_pair(root, name, seed):
    gt = _noise(seed).float()
    pred = (gt + 0.05 * _noise(seed + 100).float()).clamp(0, 1)
    write_frames(pred, root / "pred" / name / "frames")
    write_frames(gt, root / "gt" / name / "frames")
    mask = torch.zeros(16, 16, 5, 1)
    mask[4:12, 4:12] = 1
    write_masks(mask, root / "masks" / name / "masks")


def test_evaluate_directories(tmp_path):
    for i, name in enumerate(("video_0000", "video_0001")):
        _write_pair(tmp_path, name, i)
    report = evaluate(tmp_path / "pred", tmp_path / "gt", mask_dir=tmp_path / "masks")
    assert [v.name for v in report.videos] == ["video_0000", "video_0001"]
    assert all(0 < v.psnr < MAX_PSNR and 0 < v.ssim < 1 for v in report.videos)
    assert all(v.masked_psnr is not None for v in report.videos)

    parallel = evaluate(tmp_path / "pred", tmp_path / "gt", mask_dir=tmp_path / "masks", workers=2)
    assert parallel.to_dict() == report.to_dict()

    report.save_json(tmp_path / "report.json")
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["mean"]["psnr"] == pytest.approx(report.mean_psnr)
    report.save_xlsx(tmp_path / "report.xlsx")
    assert len(pd.read_excel(tmp_path / "report.xlsx", sheet_name="videos")) == 2


def test_evaluate_resizes_both_sets(tmp_path):
    _write_pair(tmp_path, "clip", 3)
    report = evaluate(tmp_path / "pred", tmp_path / "gt", resize=(24, 32))
    assert len(report.videos) == 1


def test_single_videos_match_by_position(tmp_path):
    gt = _noise(7).float()
    write_frames(gt, tmp_path / "result")
    write_frames(gt, tmp_path / "reference")
    report = evaluate(tmp_path / "result", tmp_path / "reference")
    assert report.videos[0].psnr == MAX_PSNR
    assert report.videos[0].ssim == pytest.approx(1.0, abs=1e-9)
    assert report.mean_psnr == report.videos[0].psnr and report.mean_ssim == report.videos[0].ssim


def test_misaligned_sets(tmp_path):
    _write_pair(tmp_path, "a", 0)
    _write_pair(tmp_path, "b", 1)
    write_frames(_noise(9).float(), tmp_path / "gt" / "c" / "frames")
    with pytest.raises(ValidationError):
        evaluate(tmp_path / "pred", tmp_path / "gt")
