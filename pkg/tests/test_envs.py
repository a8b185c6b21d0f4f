"""Test cases for the environments."""

import copy

import numpy as np
import pytest
from loguru import logger
from scipy.stats import chisquare

from acoe_lab.envs import (
    Bounds,
    ContinuousNavEnv,
    TabularGridEnv,
    make_env,
)
from acoe_lab.errors import ContractViolation, SnapshotMismatch

UP, RIGHT, DOWN, LEFT = range(4)


def test_nav_reset_is_seeded(nav_env):
    """Test case for identical starts under identical seeds."""
    first = nav_env.reset(5)
    other = ContinuousNavEnv(dim=2, horizon=20)
    np.testing.assert_array_equal(first, other.reset(5))
    assert nav_env.bounds.contains(first)


def test_nav_reward_peaks_at_goal(nav_env):
    """Test case for the distance-shaped reward."""
    assert nav_env.reward_query(np.zeros(2), 0) == 1.0
    assert nav_env.reward_query(np.array([0.5, -0.25]), 0) == pytest.approx(0.5)
    assert nav_env.reward_query(np.array([1.0, 1.0]), 3) == 0.0


def test_nav_discrete_moves(nav_env):
    """Test case for the signed axis moves of the discrete action set."""
    nav_env.reset(0)
    nav_env.position = np.zeros(2)
    state, reward, done = nav_env.step(0)
    np.testing.assert_allclose(state, [0.1, 0.0])
    assert reward == 1.0 and not done
    state, _, _ = nav_env.step(3)
    np.testing.assert_allclose(state, [0.1, -0.1])


def test_nav_positions_stay_in_bounds(nav_env):
    """Test case for clipping at the walls."""
    nav_env.reset(0)
    nav_env.position = np.array([0.95, 0.0])
    state, _, _ = nav_env.step(0)
    np.testing.assert_allclose(state, [1.0, 0.0])


def test_nav_truncates_at_horizon():
    """Test case for truncation after the horizon."""
    env = ContinuousNavEnv(dim=1, horizon=3)
    env.reset(0)
    dones = [env.step(0)[2] for _ in range(3)]
    assert dones == [False, False, True]
    assert env.truncated
    with pytest.raises(ContractViolation, match="after the episode finished"):
        env.step(0)


def test_continuous_actions():
    """Test case for velocity actions clipped to the unit box."""
    env = ContinuousNavEnv(dim=2, discrete=False, step_size=0.1)
    env.reset(0)
    env.position = np.zeros(2)
    state, _, _ = env.step(np.array([5.0, -0.5]))
    np.testing.assert_allclose(state, [0.1, -0.05])
    with pytest.raises(ContractViolation):
        env.step(np.zeros(3))


def test_reward_query_outside_bounds(nav_env):
    """Test case for reward queries at impossible states."""
    with pytest.raises(ContractViolation, match="outside the observation bounds"):
        nav_env.reward_query(np.array([1.5, 0.0]), 0)


def test_reward_query_does_not_mutate(nav_env):
    """Test case ensuring reward queries leave the episode alone."""
    state = nav_env.reset(3)
    nav_env.reward_query(np.zeros(2), 1)
    np.testing.assert_array_equal(nav_env.observation(), state)


def test_snapshot_restore_replays_noise():
    """Test case for snapshots capturing the environment stream."""
    env = ContinuousNavEnv(dim=2, noise=0.05)
    env.reset(9)
    snapshot = env.snapshot()
    first = [env.step(0)[0] for _ in range(4)]
    env.restore(snapshot)
    second = [env.step(0)[0] for _ in range(4)]
    np.testing.assert_array_equal(np.array(first), np.array(second))


def test_snapshot_mismatch(nav_env, cliff_env):
    """Test case for restoring a snapshot into another environment."""
    nav_env.reset(0)
    cliff_env.reset(0)
    with pytest.raises(SnapshotMismatch):
        cliff_env.restore(nav_env.snapshot())


def test_grid_snapshot_checks_rewards():
    """Test case for grids differing only in their rewards refusing snapshots."""
    source = TabularGridEnv(width=3, height=2, terminals={(2, 1): 1.0})
    source.reset(0)
    snapshot = source.snapshot()
    others = (
        TabularGridEnv(width=3, height=2, terminals={(2, 1): 0.5}),
        TabularGridEnv(
            width=3, height=2, terminals={(2, 1): 1.0}, cell_rewards={(1, 0): 0.1}
        ),
    )
    for other in others:
        other.reset(0)
        with pytest.raises(SnapshotMismatch):
            other.restore(snapshot)
    twin = TabularGridEnv(width=3, height=2, terminals={(2, 1): 1.0})
    twin.reset(0)
    twin.restore(snapshot)
    assert twin.cell == source.cell


def test_grid_slip_frequencies_match_model():
    """Test case for sampled slips following the transition model."""
    env = TabularGridEnv(width=3, height=3, slip=0.3, start_cells=[(1, 1)])
    row = env.tabular_model().transitions[env.index((1, 1)), RIGHT]
    targets = [env.index(cell) for cell in ((2, 1), (1, 0), (1, 2))]
    np.testing.assert_allclose(row[targets], [0.7, 0.15, 0.15])
    trials = 3000
    counts = np.zeros(env.n_states)
    for seed in range(trials):
        env.reset(seed)
        env.step(RIGHT)
        counts[env.index(env.cell)] += 1
    assert counts.sum() == counts[targets].sum()
    result = chisquare(counts[targets], trials * row[targets])
    logger.info(f"Slip outcomes {counts[targets]}, p={result.pvalue:.3f}")
    assert result.pvalue > 0.001


def test_grid_start_distribution():
    """Test case for uniform starts over the configured start cells."""
    cells = [(0, 0), (1, 0), (0, 1)]
    env = TabularGridEnv(width=3, height=3, start_cells=cells)
    start_probs = env.tabular_model().start_probs
    support = [env.index(cell) for cell in cells]
    trials = 3000
    counts = np.zeros(env.n_states)
    for seed in range(trials):
        env.reset(seed)
        counts[env.index(env.cell)] += 1
    assert counts.sum() == counts[support].sum()
    assert chisquare(counts[support], trials * start_probs[support]).pvalue > 0.001


def test_cliff_safe_path(cliff_env):
    """Test case for the deterministic detour around the cliff."""
    cliff_env.reset(0)
    total, done = 0.0, False
    for action in (UP, RIGHT, RIGHT, RIGHT, RIGHT, DOWN):
        assert not done
        _, reward, done = cliff_env.step(action)
        total += reward
    assert done and not cliff_env.truncated
    assert total == 1.0


def test_cliff_fall_terminates(cliff_env):
    """Test case for stepping into the cliff."""
    cliff_env.reset(0)
    _, reward, done = cliff_env.step(RIGHT)
    assert done and reward == 0.0


def test_tabular_model_is_stochastic():
    """Test case for the exact model of a slippery grid."""
    env = TabularGridEnv(width=3, height=3, slip=0.2)
    model = env.tabular_model()
    np.testing.assert_allclose(model.transitions.sum(axis=-1), 1.0)
    assert model.rewards.min() >= 0.0 and model.rewards.max() <= 1.0
    assert model.terminal[env.index((2, 2))]
    assert model.start_probs[env.index((0, 0))] == 1.0


def test_grid_step_matches_model_reward():
    """Test case for steps emitting the model's expected reward."""
    env = TabularGridEnv(width=2, height=1, terminals={(1, 0): 1.0})
    env.reset(0)
    _, reward, done = env.step(RIGHT)
    assert reward == env.tabular_model().rewards[0, RIGHT] == 1.0
    assert done


def test_grid_encode_decode_round_trip(cliff_env):
    """Test case for the cell observation codec."""
    for index in range(cliff_env.n_states):
        cell = cliff_env.cell_of(index)
        assert cliff_env.decode(cliff_env.encode(cell)) == cell
    assert cliff_env.decode(np.array([-0.9, 0.8])) == (0, 1)


def test_grid_rejects_bad_action(cliff_env):
    """Test case for out-of-range discrete actions."""
    cliff_env.reset(0)
    with pytest.raises(ContractViolation):
        cliff_env.step(4)


def test_grid_rejects_bad_rewards():
    """Test case for rewards outside the unit interval."""
    with pytest.raises(ContractViolation):
        TabularGridEnv(terminals={(1, 1): 2.0})


def test_make_env_variants():
    """Test case for building environments from configuration sections."""
    assert make_env({"name": "nav1d"}).obs_dim == 1
    assert make_env({"name": "nav2d", "horizon": 7}).horizon == 7
    grid = make_env({"name": "grid", "width": 3, "terminals": {"2,2": 1.0}})
    assert grid.terminals == {(2, 2): 1.0}
    assert make_env({"name": "cliff"}).n_states == 10
    with pytest.raises(ContractViolation):
        make_env({"name": "mujoco"})


def test_env_copies_are_independent(nav_env):
    """Test case for deep copies used by parallel workers."""
    nav_env.reset(0)
    clone = copy.deepcopy(nav_env)
    clone.step(0)
    assert nav_env._t == 0


def test_bounds_contains():
    """Test case for the bounds tolerance."""
    bounds = Bounds.box(2)
    assert bounds.contains([1.0, -1.0])
    assert not bounds.contains([1.1, 0.0])
