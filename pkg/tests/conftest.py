import numpy as np
import pytest

from app.models.flows import ConditionalFlow, FlowStack
from app.schemas.experiment import ExperimentConfig

SMALL_HIDDEN = 8


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_stack():
    """Factory for a small, randomly perturbed (non-identity) flow stack."""

    def _make(dim=2, n_blocks=2, cond_dim=0, seed=0, scale=0.3):
        r = np.random.default_rng(seed)
        return FlowStack(dim, n_blocks, r, cond_dim=cond_dim, hidden=SMALL_HIDDEN).randomize(r, scale)

    return _make


@pytest.fixture
def small_flow():
    """Factory for a small conditional flow; identity unless ``scale`` is given."""

    def _make(dx=2, dy=2, n_blocks=2, seed=0, scale=None):
        r = np.random.default_rng(seed)
        flow = ConditionalFlow(dx, dy, n_blocks, r, hidden=SMALL_HIDDEN)
        return flow.randomize(r, scale) if scale is not None else flow

    return _make


def tiny_config_dict() -> dict:
    """An experiment config small enough for a full pipeline in seconds."""
    return {
        "data": {"gammas": [3.0], "sigma": 0.4, "n_pretrain_pairs": 128},
        "flow": {"n_blocks": 2, "hidden": 8},
        "pretrain": {"epochs": 2, "batch_size": 32},
        "finetune": {"epochs": 2, "batch_size": 32, "n_latent": 64},
        "scratch": {"epochs": 2, "batch_size": 32, "n_latent": 64},
        "sgld": {"n_steps": 3000, "burn_in": 1000, "stride": 10},
        "evaluation": {"n_eval": 10000},
        "sampling": {"n_samples": 50},
        "grid": {"n1": 21, "n2": 21},
    }


@pytest.fixture
def tiny_config():
    return ExperimentConfig.model_validate(tiny_config_dict())
