import numpy as np
import pytest

from scoredrive.config import ExperimentConfig


@pytest.fixture
def world_cfg():
    return ExperimentConfig().world


@pytest.fixture
def scorer_cfg():
    return ExperimentConfig().scorer


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_experiment_config(out_dir: str, seed: int = 0) -> ExperimentConfig:
    """A minutes-scale config for end-to-end plumbing tests."""
    cfg = ExperimentConfig()
    cfg.seed = seed
    cfg.out_dir = out_dir
    cfg.nets.hidden = (24, 24)
    cfg.dataset.scenarios_per_kind = 2
    cfg.dataset.episode_steps = 8
    cfg.diffusion.train_steps = 60
    cfg.diffusion.batch_size = 32
    cfg.critic.train_steps = 60
    cfg.critic.batch_size = 32
    cfg.srpo.train_steps = 30
    cfg.srpo.batch_size = 32
    cfg.eval.episode_steps = 10
    cfg.eval.episodes_per_kind = 1
    cfg.bench.n_calls = 100
    return cfg
