import pytest
import torch

from models import preset
from numerics import RngStream
from settings import Settings


@pytest.fixture
def rng():
    return RngStream(1234)

@pytest.fixture
def grad_cfg():
    return preset("grad-check")

@pytest.fixture
def small_cfg():
    # fast enough for forward passes in every test
    return preset("tiny", num_heads=2, head_dim=8, freq_dim=32)

@pytest.fixture
def fresh_settings(monkeypatch):
    Settings.reset()
    yield monkeypatch
    Settings.reset()

@pytest.fixture(autouse=True)
def default_dtype():
    previous = torch.get_default_dtype()
    yield
    torch.set_default_dtype(previous)
