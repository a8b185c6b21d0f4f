"""Configuration file for pytest."""

import os

import environ
import numpy as np
import pytest

env = environ.Env()
env.read_env(env_file=os.path.join(os.path.dirname(__file__), "../.env"))
os.environ.setdefault("ACOE_PROGRESS", "false")


@pytest.fixture
def rng():
    """Fixture returning a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def make_net():
    """Fixture building small random networks."""
    from acoe_lab.diffnet import DiffNet

    def _make_net(sizes=(2, 8, 3), head="categorical", activation="tanh", seed=0):
        return DiffNet.build(
            list(sizes), np.random.default_rng(seed), activation=activation, head=head
        )

    return _make_net


@pytest.fixture
def nav_env():
    """Fixture returning a discrete 2-D navigation environment."""
    from acoe_lab.envs import ContinuousNavEnv

    return ContinuousNavEnv(dim=2, horizon=20)


@pytest.fixture
def cliff_env():
    """Fixture returning the deterministic cliff grid."""
    from acoe_lab.envs import TabularGridEnv

    return TabularGridEnv.cliff()


@pytest.fixture
def tiny_config():
    """Fixture creating TrainConfig objects small enough for unit tests."""
    from acoe_lab.agents import TrainConfig

    def _tiny_config(algo="delta-ppo", **overrides):
        values = {
            "algo": algo,
            "iterations": 2,
            "steps_per_iteration": 24,
            "epochs": 2,
            "minibatch": 8,
            "hidden_sizes": (8,),
            "neighborhood": 3,
            "surrogate_steps": 2,
            "learning_starts": 8,
            "target_sync": 10,
            "explore_steps": 20,
            "replay_capacity": 100,
        }
        values.update(overrides)
        return TrainConfig(**values)

    return _tiny_config


@pytest.fixture
def config_text():
    """Fixture rendering a small run configuration as JSON text."""
    import json

    def _config_text(**sections):
        document = {
            "env": {"name": "nav2d", "horizon": 10},
            "algo": {"name": "delta-ppo", "lam": 0.2, "hidden_sizes": [8]},
            "belief": {"kind": "a3b", "n": 3, "surrogate_steps": 2},
            "attack_train": "identity",
            "attacks_eval": ["identity", "pgd:eps=0.1,k=2"],
            "optim": {"lr": 0.005},
            "seeds": [0],
            "train": {"iterations": 2, "steps_per_iteration": 16},
            "eval": {"episodes": 2},
        }
        document.update(sections)
        return json.dumps(document, indent=2)

    return _config_text


@pytest.fixture
def config_file(tmp_path, config_text):
    """Fixture writing a run configuration to disk and returning its path."""

    def _config_file(name="config.json", **sections):
        path = tmp_path / name
        path.write_text(config_text(**sections))
        return path

    return _config_file
