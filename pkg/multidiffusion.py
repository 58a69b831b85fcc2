"""
Temporal MultiDiffusion: denoise a latent longer than the training window as
overlapping clips and average the shared frames after every step.

Clip k covers latent frames [start_k, start_k + n) with start_k = min(k * s, n' - n),
so the last clip ends exactly at n' and r = ceil((n' - n) / s) + 1. The temporal
axis is always axis -2.
"""
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Iterator, Sequence
import logging
import math
import time

import torch

from flowmatch import SchedulerConfig, VelocityFn, euler_step
from numerics import RngStream, check_finite, sample_gaussian
from utils import ClipError, ShapeError, ValidationError, format_shape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClipPlan:
    total: int
    window: int
    stride: int
    starts: tuple[int, ...]

    @property
    def length(self) -> int:
        # clip length; shorter than the window when the whole latent fits in one clip
        return min(self.window, self.total)

    @property
    def count(self) -> int:
        return len(self.starts)

    def clips(self) -> Iterator[tuple[int, int, int]]:
        for k, start in enumerate(self.starts):
            yield k, start, start + self.length

    def covering(self, index: int) -> list[tuple[int, int]]:
        """(clip, local index) pairs of every clip containing global frame `index`."""
        return [(k, index - start) for k, start, stop in self.clips() if start <= index < stop]

    def __str__(self):
        return f"{self.count} clip(s) of {self.length} over {self.total} latent frames, stride {self.stride}, starts {list(self.starts)}"


def plan_clips(total: int, window: int, stride: int) -> ClipPlan:
    """
    Raises:
        ValidationError: on non-positive sizes or stride > window (coverage gap).
    """
    if total < 1 or window < 1:
        raise ValidationError(f"latent length and window must be >= 1, got {total} and {window}")
    if stride <= 0:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if stride > window:
        raise ValidationError(f"stride {stride} > window {window} would leave frames uncovered")
    if total <= window:
        return ClipPlan(total, window, stride, (0,))
    r = math.ceil((total - window) / stride) + 1
    starts = tuple(min(k * stride, total - window) for k in range(r))
    return ClipPlan(total, window, stride, starts)

def default_stride(window: int) -> int:
    return max(1, window // 2)


def fuse_step(clip_states: Sequence[torch.Tensor], plan: ClipPlan) -> torch.Tensor:
    """
    Averages every global frame over the clips containing it.

    Sums are accumulated in float64 and the result is cast back to the clip dtype.

    Raises:
        ShapeError: if the clip count or any clip shape disagrees with the plan.
    """
    if len(clip_states) != plan.count:
        raise ShapeError(f"fuse_step: plan has {plan.count} clips, got {len(clip_states)} states")
    ref = clip_states[0]
    for state in clip_states:
        if state.shape != ref.shape or state.shape[-2] != plan.length:
            raise ShapeError(f"fuse_step: clip {format_shape(state.shape)} does not fit a plan of clip length {plan.length}")

    shape = (*ref.shape[:-2], plan.total, ref.shape[-1])
    value = torch.zeros(shape, dtype=torch.float64)
    count = torch.zeros(plan.total, 1, dtype=torch.float64)
    for (k, start, stop), state in zip(plan.clips(), clip_states):
        value[..., start:stop, :] += state.to(torch.float64)
        count[start:stop] += 1
    return (value / count).to(ref.dtype)


def long_denoise(velocity_fn: VelocityFn, y: torch.Tensor, m: torch.Tensor, cfg: SchedulerConfig, plan: ClipPlan,
                 rng: RngStream, workers: int = 1) -> torch.Tensor:
    """
    Euler sampling of a long latent with per-step clip fusion.

    One global noise tensor is drawn for the full length and sliced per clip, so
    overlapping clips start from identical states. Each step evaluates the
    velocity of every clip, advances each clip one Euler step and fuses them.

    Args:
        velocity_fn: velocity(x, y, m, t) on one clip.
        y (Tensor): masked-video latent, temporal axis -2 of length plan.total.
        m (Tensor): latent mask aligned with y.
        cfg (SchedulerConfig): number of Euler steps.
        plan (ClipPlan): covering of the temporal axis.
        rng (RngStream): noise stream.
        workers (int): threads evaluating the clips of one step.

    Returns:
        Tensor: the denoised latent, shaped like y.

    Raises:
        ClipError: when velocity_fn fails on a clip; the cause is chained.
        NumericsError: on a non-finite fused state, with the step index.
    """
    cfg.validate()
    if y.shape[-2] != plan.total or m.shape[-2] != plan.total:
        raise ShapeError(f"latent length {y.shape[-2]} / mask length {m.shape[-2]} does not match plan total {plan.total}")
    if workers < 1:
        raise ValidationError(f"workers must be >= 1, got {workers}")

    x0 = sample_gaussian(rng, y.shape, torch.float64)
    displacement = torch.zeros_like(x0)
    dt = 1.0 / cfg.num_steps
    logger.info(f"multidiffusion plan: {plan}")

    pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="clip") if workers > 1 else nullcontext()
    with pool:
        for i, t in enumerate(cfg.grid()):
            started = time.perf_counter()

            def advance(clip):
                k, start, stop = clip
                try:
                    return euler_step(velocity_fn, x0[..., start:stop, :], displacement[..., start:stop, :],
                                      y[..., start:stop, :], m[..., start:stop, :], t, dt)
                except Exception as e:
                    raise ClipError(f"velocity failed on clip {k} (frames {start}..{stop - 1}) at step {i}: {e}", k) from e

            clips = list(plan.clips())
            states = list(pool.map(advance, clips)) if workers > 1 else [advance(clip) for clip in clips]
            displacement = fuse_step(states, plan)
            check_finite(displacement, "long_denoise", i)
            logger.info(f"step {i + 1}/{cfg.num_steps} t={t:.3f}: {plan.count} clip(s) in {time.perf_counter() - started:.2f}s")
    return (x0 + displacement).to(y.dtype)


@dataclass
class BoundaryJumps:
    """Max-abs frame-to-frame latent jumps, split by whether a clip edge lies between the frames."""
    boundary: list[float]
    within: list[float]

    @property
    def spike(self) -> bool:
        return bool(self.boundary and self.within and max(self.boundary) > max(self.within))

    def __str__(self):
        fmt = lambda values: f"max {max(values):.4f}" if values else "none"
        return f"boundary jumps {fmt(self.boundary)}, within-clip jumps {fmt(self.within)}"

def boundary_jumps(latent: torch.Tensor, plan: ClipPlan) -> BoundaryJumps:
    if latent.shape[-2] != plan.total:
        raise ShapeError(f"latent length {latent.shape[-2]} does not match plan total {plan.total}")
    if plan.total < 2:
        return BoundaryJumps([], [])
    edges = set()
    for _, start, stop in plan.clips():
        if start > 0:
            edges.add(start - 1) # jump from start-1 to start
        if stop < plan.total:
            edges.add(stop - 1)
    jumps = (latent[..., 1:, :] - latent[..., :-1, :]).abs()
    per_frame = jumps.movedim(-2, 0).reshape(plan.total - 1, -1).amax(dim=1).tolist()
    boundary = [j for i, j in enumerate(per_frame) if i in edges]
    within = [j for i, j in enumerate(per_frame) if i not in edges]
    return BoundaryJumps(boundary, within)
