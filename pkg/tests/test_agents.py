"""Test cases for delta-PPO training, rollouts and evaluation."""

import numpy as np
import pytest
from loguru import logger

from acoe_lab.agents import (
    PPOTrainer,
    RngStreams,
    TrainConfig,
    Trajectory,
    acoe_advantage,
    attack_stream,
    collect_rollouts,
    compute_to_go,
    discounted_sum,
    evaluate,
    gae_advantage,
    ppo_update,
    prepare_trajectory,
    train_ppo,
)
from acoe_lab.attacks import AttackSpec
from acoe_lab.diffnet import Optimizer, OptimizerConfig
from acoe_lab.envs import ContinuousNavEnv
from acoe_lab.errors import ContractViolation


def make_trajectory(rewards, deltas=None, terminal=True, value=0.0, delta=0.0):
    n = len(rewards)
    return Trajectory(
        observations=np.zeros((n, 1)),
        actions=np.zeros(n, dtype=int),
        log_probs=np.zeros(n),
        rewards=rewards,
        values=np.zeros(n),
        deltas=np.zeros(n) if deltas is None else deltas,
        dones=[False] * (n - 1) + [True],
        terminal=terminal,
        bootstrap_value=value,
        bootstrap_delta=delta,
    )


def test_discounted_sum():
    """Test case for the backward discounted recursion."""
    np.testing.assert_allclose(discounted_sum([1.0, 1.0, 1.0], 0.5), [1.75, 1.5, 1.0])
    np.testing.assert_allclose(discounted_sum([0.0, 0.0], 0.5, bootstrap=4.0), [1, 2])


def test_to_go_bootstraps_only_on_truncation():
    """Test case for the tails of returns and C-ACoE sums."""
    terminal = make_trajectory([1.0, 1.0], [0.2, 0.2], value=10.0, delta=10.0)
    returns, deltas = compute_to_go(terminal, 0.5)
    np.testing.assert_allclose(returns, [1.5, 1.0])
    np.testing.assert_allclose(deltas, [0.3, 0.2])
    truncated = make_trajectory(
        [1.0, 1.0], [0.2, 0.2], terminal=False, value=2.0, delta=0.4
    )
    returns, deltas = compute_to_go(truncated, 0.5)
    np.testing.assert_allclose(returns, [2.0, 2.0])
    np.testing.assert_allclose(deltas, [0.4, 0.4])


def test_gae_with_unit_trace_is_return_minus_value():
    """Test case for GAE(lambda = 1) equal to discounted return minus value."""
    trajectory = make_trajectory([0.5, 0.2, 1.0])
    trajectory.values = np.array([0.1, 0.3, 0.2])
    advantages = gae_advantage(trajectory, 0.9, 1.0)
    expected = discounted_sum(trajectory.rewards, 0.9) - trajectory.values
    np.testing.assert_allclose(advantages, expected)


def test_ppo_update_needs_a_batch(make_net, rng):
    """Test case for an update over no collected steps."""
    net = make_net()
    with pytest.raises(ContractViolation, match="nonempty"):
        ppo_update(net, net, net, [], TrainConfig(), {}, rng)


def bandit_batch(rewards_by_arm, pulls=16):
    trajectories = []
    for pull in range(pulls):
        arm = pull % 2
        trajectory = make_trajectory([rewards_by_arm[arm]])
        trajectory.actions = np.array([arm])
        trajectory.log_probs = np.log([0.5])
        trajectories.append(trajectory)
    return trajectories


def bandit_setup(make_net, rewards_by_arm, **overrides):
    policy = make_net(sizes=(1, 2))
    policy.weights = [np.zeros_like(w) for w in policy.weights]
    policy.biases = [np.zeros_like(b) for b in policy.biases]
    value_net = make_net(sizes=(1, 1), head="linear")
    delta_net = make_net(sizes=(1, 1), head="linear", seed=1)
    config = TrainConfig(algo="ppo", minibatch=8, **overrides)
    trajectories = [
        prepare_trajectory(t, config) for t in bandit_batch(rewards_by_arm)
    ]
    optimizers = {
        name: Optimizer(OptimizerConfig(), net)
        for name, net in (
            ("policy", policy),
            ("value", value_net),
            ("delta", delta_net),
        )
    }
    return policy, value_net, delta_net, trajectories, config, optimizers


def test_ppo_update_prefers_the_better_arm(make_net, rng):
    """Test case for a two-armed bandit raising the paying arm's probability."""
    policy, value_net, delta_net, batch, config, optimizers = bandit_setup(
        make_net, (0.0, 1.0)
    )
    before = policy.distribution([0.0]).probs
    ppo_update(policy, value_net, delta_net, batch, config, optimizers, rng)
    after = policy.distribution([0.0]).probs
    logger.info(f"Arm probabilities {before} -> {after}")
    assert before[1] == pytest.approx(0.5)
    assert after[1] > 0.5


def test_ppo_update_zero_advantage_keeps_policy(make_net, rng):
    """Test case for equal rewards leaving the policy parameters untouched."""
    policy, value_net, delta_net, batch, config, optimizers = bandit_setup(
        make_net, (0.5, 0.5)
    )
    for trajectory in batch:
        trajectory.combined = np.zeros(1)
    weights = [w.copy() for w in policy.weights]
    biases = [b.copy() for b in policy.biases]
    ppo_update(policy, value_net, delta_net, batch, config, optimizers, rng)
    for old, new in zip(weights + biases, policy.weights + policy.biases):
        np.testing.assert_array_equal(old, new)


def test_acoe_advantage():
    """Test case for the combined advantage and its shape check."""
    np.testing.assert_allclose(acoe_advantage([1.0, 2.0], [0.5, -1.0], 2.0), [0, 4])
    with pytest.raises(ContractViolation):
        acoe_advantage([1.0, 2.0], [0.5], 1.0)


def test_prepare_trajectory_ignores_deltas_for_vanilla():
    """Test case for vanilla algorithms using lambda = 0 whatever lam says."""
    trajectory = make_trajectory([1.0, 0.0], [0.5, 0.5])
    prepare_trajectory(trajectory, TrainConfig(algo="ppo", lam=5.0))
    np.testing.assert_array_equal(trajectory.combined, trajectory.advantages)


def test_trajectory_rejects_ragged_fields():
    """Test case for mismatched trajectory lengths."""
    with pytest.raises(ContractViolation):
        Trajectory(
            observations=np.zeros((2, 1)),
            actions=[0, 0],
            log_probs=[0.0],
            rewards=[0.0, 0.0],
            values=[0.0, 0.0],
            deltas=[0.0, 0.0],
            dones=[False, True],
        )


def test_rng_streams_are_independent():
    """Test case for named streams not shifting each other."""
    first, second = RngStreams(7), RngStreams(7)
    first["env"].random(100)
    assert first["action"].random() == second["action"].random()
    assert RngStreams(7)["env"].random() != RngStreams(8)["env"].random()


def test_rng_streams_state_round_trip():
    """Test case for restoring saved stream positions."""
    streams = RngStreams(3)
    streams["env"].random(5)
    saved = streams.state()
    expected = streams["env"].random(3)
    restored = RngStreams(3)
    restored.load_state(saved)
    np.testing.assert_array_equal(restored["env"].random(3), expected)


@pytest.mark.parametrize(
    "values", [{"algo": "sac"}, {"lam": -1.0}, {"clip": 1.5}, {"q_target": "mean"}]
)
def test_train_config_validation(values):
    """Test case for invalid training hyperparameters."""
    with pytest.raises(ContractViolation):
        TrainConfig(**values)


def test_train_config_dict_round_trip(tiny_config):
    """Test case for rebuilding a configuration from its dictionary."""
    config = tiny_config()
    assert TrainConfig.from_dict(config.to_dict()) == config


def test_collect_rollouts_splits_episodes(tiny_config):
    """Test case for trajectories split at episode ends."""
    env = ContinuousNavEnv(dim=1, horizon=5)
    trainer = PPOTrainer(env, tiny_config(algo="ppo"))
    trajectories = collect_rollouts(
        trainer.bundle.policy, env, T=12, value_net=trainer.bundle.value
    )
    assert [len(t) for t in trajectories] == [5, 5, 2]
    assert all(not t.terminal for t in trajectories)
    assert trajectories[0].episode_complete and not trajectories[-1].episode_complete


def test_collect_rollouts_with_workers(tiny_config):
    """Test case for per-worker environment copies and streams."""
    env = ContinuousNavEnv(dim=2, horizon=50)
    trainer = PPOTrainer(env, tiny_config(algo="ppo"))
    first = collect_rollouts(trainer.bundle.policy, env, T=10, workers=2)
    second = collect_rollouts(trainer.bundle.policy, env, T=10, workers=2)
    assert sum(len(t) for t in first) == 20
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.actions, b.actions)


def test_lambda_zero_matches_vanilla_ppo(tiny_config):
    """Test case for delta-PPO with lam = 0 training the same policy as PPO."""
    vanilla = PPOTrainer(ContinuousNavEnv(dim=2, horizon=10), tiny_config(algo="ppo"))
    robust = PPOTrainer(
        ContinuousNavEnv(dim=2, horizon=10), tiny_config(algo="delta-ppo", lam=0.0)
    )
    vanilla.run(5)
    robust.run(5)
    assert any(np.any(t.deltas != 0) for t in robust.last_trajectories)
    for name in ("policy", "value"):
        for mine, theirs in zip(
            getattr(vanilla.bundle, name).parameters(),
            getattr(robust.bundle, name).parameters(),
        ):
            np.testing.assert_array_equal(mine, theirs)


def test_zero_budget_belief_has_no_error(tiny_config):
    """Test case for delta_R vanishing when the belief radius is zero."""
    trainer = PPOTrainer(
        ContinuousNavEnv(dim=2, horizon=10), tiny_config(train_eps=0.0, lam=1.0)
    )
    row = trainer.step()
    assert row["mean_delta_r"] == 0.0
    for trajectory in trainer.last_trajectories:
        np.testing.assert_array_equal(trajectory.deltas, 0.0)


def test_delta_ppo_training_rows(tiny_config):
    """Test case for the statistics reported by each iteration."""
    trainer = PPOTrainer(ContinuousNavEnv(dim=2, horizon=10), tiny_config())
    rows = trainer.run()
    logger.info(rows)
    assert [row["iteration"] for row in rows] == [1, 2]
    for row in rows:
        assert -1.0 <= row["mean_delta_r"] <= 1.0
        assert np.isfinite(row["policy_loss"])
        assert row["episodes"] >= 2


def test_run_resumes_from_iteration(tiny_config):
    """Test case for run() only doing the remaining iterations."""
    trainer = PPOTrainer(ContinuousNavEnv(dim=1, horizon=10), tiny_config(algo="ppo"))
    trainer.step()
    assert len(trainer.run(3)) == 2
    assert trainer.iteration == 3


def test_train_ppo_continuous_actions(tiny_config):
    """Test case for a gaussian policy on continuous navigation."""
    env = ContinuousNavEnv(dim=2, horizon=10, discrete=False)
    bundle = train_ppo(env, tiny_config(algo="ppo", iterations=1))
    assert bundle.policy.is_gaussian
    assert bundle.acting_policy is bundle.policy


def test_attack_stream_is_per_episode():
    """Test case for adversary streams keyed by seed and episode."""
    assert attack_stream(0, 1).random() == attack_stream(0, 1).random()
    assert attack_stream(0, 1).random() != attack_stream(0, 2).random()


def test_evaluate_records(tiny_config):
    """Test case for one record per episode and seed."""
    env = ContinuousNavEnv(dim=2, horizon=8)
    bundle = train_ppo(env, tiny_config(algo="ppo", iterations=1))
    result = evaluate(bundle, env, AttackSpec.parse("fgsm:eps=0.1"), 3, (0, 1))
    assert len(result.records) == 6
    assert {(r["seed"], r["episode"]) for r in result.records} == {
        (s, e) for s in (0, 1) for e in range(3)
    }
    assert all(r["length"] == 8 for r in result.records)
    assert result.summary()["episodes"] == 6
    assert result.attack == "fgsm:eps=0.1"


def test_evaluate_is_reproducible_across_workers(tiny_config):
    """Test case for identical records with one or several workers."""
    env = ContinuousNavEnv(dim=2, horizon=8)
    bundle = train_ppo(env, tiny_config(algo="ppo", iterations=1))
    spec = AttackSpec.parse("pgd:eps=0.1,k=3")
    serial = evaluate(bundle, env, spec, episodes=4)
    parallel = evaluate(bundle, env, spec, episodes=4, workers=3)
    assert serial.records == parallel.records


def test_identity_attack_leaves_observations_alone(tiny_config):
    """Test case for zero attacked steps without an adversary."""
    env = ContinuousNavEnv(dim=1, horizon=6)
    bundle = train_ppo(env, tiny_config(algo="ppo", iterations=1))
    result = evaluate(bundle, env, episodes=2)
    assert all(record["attacked_steps"] == 0 for record in result.records)
    assert result.attack == "identity"
