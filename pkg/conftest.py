"""Shared fixtures: 64-bit tensors for every test, toy configs, the slow marker."""

import pytest
import torch

from model_config import load_config
from series_data import make_synthetic_frame

TOY_OVERRIDES = {
    "data.seq_len": 32,
    "data.label_len": 16,
    "data.pred_len": 8,
    "data.horizons": [8],
    "data.split": [0.6, 0.2, 0.2],
    "vision.period": 8,
    "vision.image_size": 16,
    "vae.channels": [4, 8, 8],
    "vae.epochs": 1,
    "model.d_model": 8,
    "model.d_ldm": 8,
    "model.d_fusion": 8,
    "model.d_ff": 16,
    "model.n_heads": 2,
    "temporal.patch_len": 8,
    "temporal.stride": 4,
    "temporal.padding": 4,
    "temporal.e_layers": 1,
    "conditioning.text_bins": 64,
    "diffusion.num_timesteps": 20,
    "diffusion.inference_steps": 4,
    "train.batch_size": 8,
    "train.epochs": 1,
    "train.patience": 1,
    "train.max_steps": 3,
    "train.val_max_windows": 8,
    "train.log_every": 1,
    "numerics.precision": "float64",
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale learning test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def toy_cfg():
    """Tiny effective config: a few seconds per train step on CPU."""
    return load_config(overrides=list(TOY_OVERRIDES.items()))


@pytest.fixture
def toy_frame():
    return make_synthetic_frame(n_rows=300, seed=0, period=8)
