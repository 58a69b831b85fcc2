import math

import numpy as np
import pytest
import torch

from flowmatch import SchedulerConfig, euler_sample, fm_loss, interpolate, sample_timestep, velocity_target
from numerics import RngStream, sample_gaussian
from utils import NumericsError, ShapeError, ValidationError

SHAPE = (2, 2, 3, 8)


def _conditioning():
    return torch.zeros(SHAPE), torch.zeros(*SHAPE[:-1], 4)


def test_scheduler_validation():
    with pytest.raises(ValidationError):
        SchedulerConfig(num_steps=0).validate()
    with pytest.raises(ValidationError):
        SchedulerConfig(sigma=0.0).validate()
    assert SchedulerConfig(num_steps=4).grid() == [0.0, 0.25, 0.5, 0.75]


def test_timesteps_stay_inside_unit_interval():
    t = sample_timestep(RngStream(0), SchedulerConfig(mu=0.0, sigma=8.0), size=10_000)
    assert np.all(t > 0) and np.all(t < 1)
    assert 0 < sample_timestep(RngStream(0), SchedulerConfig()) < 1


def test_logit_normal_weights_intermediate_timesteps():
    t = sample_timestep(RngStream(1), SchedulerConfig(mu=0.0, sigma=1.0), size=100_000)
    assert abs(np.median(t) - 0.5) < 0.02
    interior = np.mean((t > 0.25) & (t < 0.75))
    assert interior > 1 - interior


def test_interpolate_endpoints_and_value(rng):
    x0, x1 = sample_gaussian(rng, SHAPE), sample_gaussian(rng, SHAPE)
    assert torch.equal(interpolate(x0, x1, 0.0), x0)
    assert torch.equal(interpolate(x0, x1, 1.0), x1)
    assert interpolate(torch.tensor([0.0]), torch.tensor([2.0]), 0.25).item() == 0.5
    with pytest.raises(ValidationError):
        interpolate(x0, x1, 1.5)
    with pytest.raises(ShapeError):
        interpolate(x0, x1[..., :4], 0.5)


def test_interpolate_per_sample_t(rng):
    x0, x1 = sample_gaussian(rng, (2, 3)), sample_gaussian(rng, (2, 3))
    out = interpolate(x0, x1, torch.tensor([0.0, 1.0]))
    assert torch.equal(out[0], x0[0])
    assert torch.equal(out[1], x1[1])
    with pytest.raises(ShapeError):
        interpolate(x0, x1, torch.tensor([0.1, 0.2, 0.3]))


def test_velocity_is_the_time_derivative_of_the_path(rng):
    x0 = sample_gaussian(rng, SHAPE, torch.float64)
    x1 = sample_gaussian(rng, SHAPE, torch.float64)
    h = 1e-4
    for t in (0.1, 0.5, 0.9):
        derivative = (interpolate(x0, x1, t + h) - interpolate(x0, x1, t - h)) / (2 * h)
        assert (derivative - velocity_target(x0, x1)).abs().max() <= 1e-6


def test_velocity_target(rng):
    x0, x1 = sample_gaussian(rng, SHAPE), sample_gaussian(rng, SHAPE)
    assert torch.equal(velocity_target(x0, x0), torch.zeros(SHAPE))
    assert velocity_target(torch.tensor(1.0), torch.tensor(3.0)).item() == 2.0
    assert torch.equal(velocity_target(x0, x1), -velocity_target(x1, x0))


def test_fm_loss(rng):
    a = sample_gaussian(rng, SHAPE)
    assert fm_loss(a, a).item() == 0.0
    assert fm_loss(torch.tensor([1.0]), torch.tensor([3.0])).item() == 4.0
    b = sample_gaussian(rng, SHAPE)
    perm = torch.randperm(a.numel(), generator=torch.Generator().manual_seed(0))
    shuffled = fm_loss(a.reshape(-1)[perm], b.reshape(-1)[perm])
    assert torch.allclose(shuffled, fm_loss(a, b))
    with pytest.raises(ShapeError):
        fm_loss(a, b[..., :2])


@pytest.mark.parametrize("steps", [1, 4, 8])
def test_euler_is_exact_for_constant_velocity(rng, steps):
    x1 = sample_gaussian(rng, SHAPE)
    x0 = sample_gaussian(RngStream(7), SHAPE, torch.float64)
    velocity = (x1.double() - x0).float()
    y, m = _conditioning()
    out = euler_sample(lambda x, y, m, t: velocity, y, m, SHAPE, SchedulerConfig(num_steps=steps), RngStream(7))
    assert (out - x1).abs().max() < 1e-5


def test_euler_step_count_is_bitwise_irrelevant_for_constant_velocity(rng):
    velocity = sample_gaussian(rng, SHAPE)
    y, m = _conditioning()
    runs = [euler_sample(lambda x, y, m, t: velocity, y, m, SHAPE, SchedulerConfig(num_steps=k), RngStream(8))
            for k in (1, 4, 8)]
    assert torch.equal(runs[0], runs[1])
    assert torch.equal(runs[1], runs[2])


def test_zero_velocity_returns_the_noise():
    y, m = _conditioning()
    out = euler_sample(lambda x, y, m, t: torch.zeros_like(x), y, m, SHAPE, SchedulerConfig(), RngStream(9))
    assert torch.equal(out, sample_gaussian(RngStream(9), SHAPE))


def test_euler_converges_on_a_smooth_field():
    y, m = torch.zeros(SHAPE, dtype=torch.float64), torch.zeros(*SHAPE[:-1], 4, dtype=torch.float64)
    x0 = sample_gaussian(RngStream(10), SHAPE, torch.float64)
    exact = x0 * math.exp(-1)
    errors = []
    for steps in (4, 8, 16, 32, 64):
        out = euler_sample(lambda x, y, m, t: -x, y, m, SHAPE, SchedulerConfig(num_steps=steps), RngStream(10))
        errors.append((out - exact).abs().max().item())
    assert all(a > b for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 0.01


def test_euler_is_deterministic(rng):
    y, m = _conditioning()
    field = lambda x, y, m, t: torch.sin(x) * (1 - t)
    a = euler_sample(field, y, m, SHAPE, SchedulerConfig(), RngStream(11))
    b = euler_sample(field, y, m, SHAPE, SchedulerConfig(), RngStream(11))
    assert torch.equal(a, b)


def test_euler_rejects_wrong_velocity_shape():
    y, m = _conditioning()
    with pytest.raises(ShapeError):
        euler_sample(lambda x, y, m, t: x[..., :4], y, m, SHAPE, SchedulerConfig(), RngStream(0))


def test_euler_reports_the_failing_step():
    y, m = _conditioning()
    field = lambda x, y, m, t: torch.full_like(x, math.inf) if t >= 0.5 else torch.zeros_like(x)
    with pytest.raises(NumericsError) as info:
        euler_sample(field, y, m, SHAPE, SchedulerConfig(num_steps=4), RngStream(0))
    assert info.value.index == 2
