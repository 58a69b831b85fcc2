"""
Invariant checks runnable from the CLI (`ditpaint selftest`) and from the tests.

Every check returns a short detail string and raises AssertionError when the
invariant does not hold.
"""
from argparse import Namespace
from dataclasses import dataclass
from logging import getLogger
from typing import Callable
import math

import torch

from codec import downsample_mask, encode, latent_shape
from flowmatch import SchedulerConfig, euler_sample
from models import build_model, grid_positions, param_count, patchify, preset, rope3d, attention_logits
from multidiffusion import fuse_step, long_denoise, plan_clips
from numerics import RngStream, sample_gaussian
from templates import format_run_stats, selftest_line, selftest_summary
logger = getLogger(__name__)


def check_identity_at_init() -> str:
    cfg = preset("desk")
    model = build_model(cfg, seed=0)
    tokens = sample_gaussian(RngStream(1), (2, 20, cfg.embed_dim))
    rope = rope3d(grid_positions(5, 2, 2), cfg.head_dim)
    with torch.no_grad():
        _, modulations = model.timestep_embed(torch.tensor([0.3, 0.7]))
        for i, (block, mod) in enumerate(zip(model.blocks, modulations)):
            assert torch.equal(block(tokens, mod, rope), tokens), f"block {i} is not the identity at init"
    return f"{cfg.num_blocks} blocks exact identity"


def fuse_oracle(clips: list[torch.Tensor], plan) -> torch.Tensor:
    """Per-frame average over the covering clips, enumerated one frame at a time."""
    frames = []
    for i in range(plan.total):
        members = [clips[k][..., j, :].to(torch.float64) for k, j in plan.covering(i)]
        frames.append((sum(members) / len(members)).to(clips[0].dtype))
    return torch.stack(frames, dim=-2)

def check_fusion_sweep(max_total: int = 12, max_window: int = 6) -> str:
    rng = RngStream(2)
    plans = 0
    for total in range(1, max_total + 1):
        for window in range(1, max_window + 1):
            for stride in range(1, window + 1):
                plan = plan_clips(total, window, stride)
                covered = [len(plan.covering(i)) for i in range(total)]
                assert min(covered) >= 1, f"plan {plan} leaves a frame uncovered"
                assert plan.starts[-1] + plan.length == total, f"plan {plan} does not end at {total}"
                if total > window:
                    assert plan.count == math.ceil((total - window) / stride) + 1
                clips = [sample_gaussian(rng, (2, 1, plan.length, 3)) for _ in range(plan.count)]
                assert torch.equal(fuse_step(clips, plan), fuse_oracle(clips, plan)), f"fusion differs on {plan}"
                plans += 1
    return f"{plans} plans match per-frame averaging"


def check_euler_exactness() -> str:
    shape = (2, 2, 3, 8)
    x1 = sample_gaussian(RngStream(3), shape)
    x0 = sample_gaussian(RngStream(4), shape, torch.float64)
    velocity = (x1.to(torch.float64) - x0).to(x1.dtype)
    oracle = lambda x, y, m, t: velocity
    y, m = torch.zeros(shape), torch.zeros(*shape[:-1], 4)
    results = {}
    for steps in (1, 4, 8):
        results[steps] = euler_sample(oracle, y, m, shape, SchedulerConfig(num_steps=steps), RngStream(4))
        error = (results[steps] - x1).abs().max().item()
        assert error < 1e-5, f"K={steps} misses x1 by {error}"
    assert torch.equal(results[4], results[8]), "K=4 and K=8 differ"
    assert torch.equal(results[1], results[8]), "K=1 and K=8 differ"
    return "K in (1, 4, 8) reach x1 and agree bitwise"


def check_long_denoise_degenerate() -> str:
    shape = (2, 2, 4, 8)
    y, m = sample_gaussian(RngStream(5), shape), torch.rand(*shape[:-1], 4, generator=torch.Generator().manual_seed(5))
    velocity = lambda x, y, m, t: -x + y * t
    cfg = SchedulerConfig(num_steps=4)
    single = euler_sample(velocity, y, m, shape, cfg, RngStream(6))
    windowed = long_denoise(velocity, y, m, cfg, plan_clips(4, 6, 3), RngStream(6))
    assert torch.equal(single, windowed), "single-clip multidiffusion differs from euler_sample"
    return "one-clip plan is bit-identical to euler_sample"


def check_rope_shift(head_dim: int = 24, shift: int = 5) -> str:
    rng = RngStream(7)
    positions = grid_positions(3, 3, 3)
    q = sample_gaussian(rng, (positions.shape[0], head_dim), torch.float64)
    k = sample_gaussian(rng, (positions.shape[0], head_dim), torch.float64)
    base = attention_logits(q, k, rope3d(positions, head_dim))
    worst = 0.0
    for axis in range(3):
        offset = [0, 0, 0]
        offset[axis] = shift
        shifted = attention_logits(q, k, rope3d(positions + torch.tensor(offset), head_dim))
        worst = max(worst, (shifted - base).abs().max().item())
    assert worst <= 1e-5, f"logits move by {worst} under a shift"
    return f"max logit change {worst:.2e} under shifts of {shift}"


def check_shapes() -> str:
    assert latent_shape(64, 64, 65) == (8, 8, 17)
    video = torch.zeros(64, 64, 65, 3)
    latent = encode(video)
    mask = downsample_mask(torch.zeros(64, 64, 65, 1))
    assert tuple(latent.shape) == (8, 8, 17, 8) and tuple(mask.shape) == (8, 8, 17, 4)
    tokens = patchify(latent.unsqueeze(0))
    assert tokens.shape[1] == 8 * 8 * 17 // 4 == 272
    return "64x64x65 -> 8x8x17x8 latent, 8x8x17x4 mask, 272 tokens"


def check_param_count() -> str:
    count = param_count(preset("full"))
    assert 3.2e8 <= count <= 4.8e8, f"full preset has {count} parameters"
    return f"full preset {count / 1e6:.1f}M parameters"


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

CHECKS: list[tuple[str, Callable[[], str]]] = [
    ("identity at init", check_identity_at_init),
    ("fusion sweep", check_fusion_sweep),
    ("euler exactness", check_euler_exactness),
    ("single-clip multidiffusion", check_long_denoise_degenerate),
    ("rope shift invariance", check_rope_shift),
    ("shape contract", check_shapes),
    ("parameter count", check_param_count),
]

def run_checks() -> list[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            results.append(CheckResult(name, True, check()))
        except AssertionError as e:
            logger.error(f"selftest {name} failed: {e}")
            results.append(CheckResult(name, False, str(e) or "assertion failed"))
    return results


def run(args: Namespace) -> int:
    results = run_checks()
    for r in results:
        print(selftest_line.format(status="PASS" if r.passed else "FAIL", name=r.name, detail=r.detail))
    passed = sum(r.passed for r in results)
    print(selftest_summary.format(passed=passed, total=len(results), run_stats=format_run_stats()))
    return 0 if passed == len(results) else 2


def setup(subparsers):
    parser = subparsers.add_parser("selftest", help="run the built-in invariant checks")
    parser.set_defaults(handler=run)
