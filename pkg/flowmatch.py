"""
Flow matching on the linear path between noise x0 (t=0) and data x1 (t=1).

    x_t = t * x1 + (1 - t) * x0        v = x1 - x0        loss = mean((u - v)^2)

Sampling integrates the predicted velocity with first-order Euler steps on the
uniform left-endpoint grid t_i = i / K. The sampler state is kept in float64 as
noise plus accumulated displacement; the velocity function always sees the
working dtype.
"""
from dataclasses import dataclass
from typing import Callable, Union
import logging
import time

import numpy as np
import torch
import torch.nn.functional as F

from numerics import RngStream, check_finite, sample_gaussian
from utils import ShapeError, ValidationError, check_same_shape, format_shape

logger = logging.getLogger(__name__)

VelocityFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, float], torch.Tensor]

# smallest margin that keeps float32 timesteps strictly inside (0, 1)
T_MARGIN = float(np.finfo(np.float32).eps)


@dataclass(frozen=True)
class SchedulerConfig:
    num_steps: int = 4
    mu: float = 0.0
    sigma: float = 1.0

    def validate(self) -> "SchedulerConfig":
        if self.num_steps < 1:
            raise ValidationError(f"num_steps must be >= 1, got {self.num_steps}")
        if not self.sigma > 0:
            raise ValidationError(f"logit-normal sigma must be > 0, got {self.sigma}")
        return self

    def grid(self) -> list[float]:
        return [i / self.num_steps for i in range(self.num_steps)]


def sample_timestep(rng: RngStream, cfg: SchedulerConfig, size: int | None = None) -> Union[float, np.ndarray]:
    """
    Logit-normal timestep(s): sigmoid(mu + sigma * z), z ~ N(0, 1).

    Args:
        rng (RngStream): advances by one normal draw per timestep.
        cfg (SchedulerConfig): supplies mu and sigma.
        size (int, optional): number of draws; a single float when omitted.

    Returns:
        float | np.ndarray: values strictly inside (0, 1).
    """
    cfg.validate()
    z = rng.normal((1,) if size is None else (size,))
    t = 1.0 / (1.0 + np.exp(-(cfg.mu + cfg.sigma * z)))
    t = np.clip(t, T_MARGIN, 1.0 - T_MARGIN)
    return float(t[0]) if size is None else t


def _broadcast_t(t: Union[float, torch.Tensor], like: torch.Tensor) -> Union[float, torch.Tensor]:
    if not isinstance(t, torch.Tensor) or t.dim() == 0:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ValidationError(f"t must lie in [0, 1], got {t}")
        return t
    if t.dim() != 1 or t.shape[0] != like.shape[0]:
        raise ShapeError(f"per-sample t {format_shape(t.shape)} does not match batch {format_shape(like.shape)}")
    if ((t < 0) | (t > 1)).any():
        raise ValidationError("t must lie in [0, 1]")
    return t.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))

def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: Union[float, torch.Tensor]) -> torch.Tensor:
    """x_t = t * x1 + (1 - t) * x0; t is a scalar or one value per leading batch entry."""
    check_same_shape("interpolate", x0, x1)
    t = _broadcast_t(t, x0)
    return t * x1 + (1 - t) * x0

def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    check_same_shape("velocity_target", x0, x1)
    return x1 - x0

def fm_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    check_same_shape("fm_loss", prediction, target)
    return F.mse_loss(prediction, target)


def euler_step(velocity_fn: VelocityFn, x0: torch.Tensor, displacement: torch.Tensor,
               y: torch.Tensor, m: torch.Tensor, t: float, dt: float) -> torch.Tensor:
    """One Euler step on the float64 state x0 + displacement; returns the new displacement."""
    x = (x0 + displacement).to(y.dtype)
    v = velocity_fn(x, y, m, t)
    if v.shape != x.shape:
        raise ShapeError(f"velocity has shape {format_shape(v.shape)}, state has {format_shape(x.shape)}")
    return displacement + dt * v.to(torch.float64)

def euler_sample(velocity_fn: VelocityFn, y: torch.Tensor, m: torch.Tensor, shape, cfg: SchedulerConfig,
                 rng: RngStream) -> torch.Tensor:
    """
    Integrates dx/dt = velocity_fn(x, y, m, t) from Gaussian noise at t=0 to t=1.

    Raises:
        ShapeError: if velocity_fn returns a tensor of the wrong shape.
        NumericsError: on a non-finite state, with the step index.
    """
    cfg.validate()
    x0 = sample_gaussian(rng, shape, torch.float64)
    displacement = torch.zeros_like(x0)
    dt = 1.0 / cfg.num_steps
    for i, t in enumerate(cfg.grid()):
        started = time.perf_counter()
        displacement = euler_step(velocity_fn, x0, displacement, y, m, t, dt)
        check_finite(displacement, "euler_sample", i)
        logger.debug(f"euler step {i + 1}/{cfg.num_steps} t={t:.3f} in {time.perf_counter() - started:.3f}s")
    return (x0 + displacement).to(y.dtype)
