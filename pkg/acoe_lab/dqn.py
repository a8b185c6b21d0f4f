"""delta-DQN training; vanilla DQN is the lam = 0 special case."""

from collections import deque
from dataclasses import dataclass

import numpy as np
from loguru import logger
from tqdm import tqdm

from . import settings
from .agents import PolicyBundle, RngStreams
from .belief import BeliefBuilder, immediate_counterfactual_error
from .diffnet import DiffNet, Optimizer, ScoreDifferencePolicy, SquaredError
from .errors import ContractViolation

DELTA_R_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class ReplayEntry:
    """
    One stored transition.

    Attributes:
        observation (np.ndarray): Observation acted on.
        action (int): Action taken.
        reward (float): Reward received.
        next_observation (np.ndarray): Following observation.
        delta_r (float): Immediate counterfactual error, in [-1, 1].
        done (bool): Whether the next state is terminal.
    """

    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    delta_r: float
    done: bool

    def __post_init__(self):
        values = np.concatenate(
            [
                np.ravel(self.observation),
                np.ravel(self.next_observation),
                [self.reward, self.delta_r],
            ]
        )
        if not np.all(np.isfinite(values)):
            raise ContractViolation("Replay entries must be finite")
        if abs(self.delta_r) > 1.0 + DELTA_R_ATOL:
            raise ContractViolation(f"delta_R {self.delta_r} outside [-1, 1]")


class ReplayBuffer:
    """FIFO replay memory of bounded capacity."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ContractViolation("Replay capacity must be positive")
        self.capacity = int(capacity)
        self.entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.entries)

    def add(self, entry):
        self.entries.append(entry)

    def sample(self, batch_size, rng):
        if batch_size > len(self.entries):
            raise ContractViolation(
                f"Cannot sample {batch_size} entries from {len(self.entries)}"
            )
        indices = rng.choice(len(self.entries), size=batch_size, replace=False)
        return [self.entries[i] for i in indices]


def dqn_action(q_net, delta_net, s_o, lam, explore_eps, rng):
    """
    Epsilon-greedy action over Q(s, .) - lam * delta(s, .).

    A uniform draw decides exploration first; ties in the greedy branch go to the
    lowest index.
    """

    if rng.random() < explore_eps:
        return int(rng.integers(q_net.output_dim))
    scores = q_net(s_o)
    if lam != 0:
        scores = scores - lam * delta_net(s_o)
    return int(np.argmax(scores))


def bootstrap_targets(entries, target_net, gamma, reduce):
    """immediate + gamma * reduce_a' target(s', a'), zero tail on terminal entries."""
    next_obs = np.stack([entry.next_observation for entry in entries])
    tail = np.atleast_2d(target_net(next_obs))
    tail = tail.max(axis=1) if reduce == "max" else tail.min(axis=1)
    alive = np.array([0.0 if entry.done else 1.0 for entry in entries])
    return gamma * alive * tail


def dqn_update(q_net, delta_net, targets, entries, config, optimizers, step=None):
    """
    One regression step of Q and delta towards their bootstrapped targets.

    Args:
        q_net (DiffNet): Q network.
        delta_net (DiffNet): delta network.
        targets (tuple): (Q target net, delta target net).
        entries (list[ReplayEntry]): Minibatch.
        config (TrainConfig): Uses gamma and q_target.
        optimizers (dict): "q" and "delta" optimizers.
        step (int | None): Environment step for diagnostics.

    Returns:
        dict | None: Losses, or None when the batch was skipped.
    """

    q_target, delta_target = targets
    observations = np.stack([entry.observation for entry in entries])
    actions = np.array([entry.action for entry in entries])
    rewards = np.array([entry.reward for entry in entries])
    deltas = np.array([entry.delta_r for entry in entries])
    q_y = rewards + bootstrap_targets(entries, q_target, config.gamma, config.q_target)
    delta_y = deltas + bootstrap_targets(entries, delta_target, config.gamma, "min")
    if not (np.all(np.isfinite(q_y)) and np.all(np.isfinite(delta_y))):
        logger.warning(f"Skipping DQN batch with non-finite targets at step {step}")
        return None
    losses = {}
    for name, net, target in (("q", q_net, q_y), ("delta", delta_net, delta_y)):
        value, grads = net.value_and_param_gradient(
            observations, SquaredError(target, actions), step
        )
        optimizers[name].step(net, grads, step)
        losses[f"{name}_loss"] = value
    return losses


def build_dqn_bundle(env, config, rng):
    """Q and delta networks plus their target copies."""
    if not env.discrete:
        raise ContractViolation("DQN needs a discrete action space")
    sizes = [env.obs_dim, *config.hidden_sizes, env.n_actions]
    q = DiffNet.build(sizes, rng)
    delta = DiffNet.build(sizes, rng)
    return PolicyBundle(
        config=config, q=q, delta=delta, q_target=q.clone(), delta_target=delta.clone()
    )


class DQNTrainer:
    """
    Step-driven delta-DQN trainer.

    One iteration is `steps_per_iteration` environment steps; targets sync every
    `target_sync` steps.
    """

    def __init__(self, env, config, adversary=None, debug_belief=False):
        self.env = env
        self.config = config
        self.adversary = adversary
        self.debug_belief = debug_belief
        self.last_beliefs = []
        self.streams = RngStreams(config.seed)
        self.bundle = build_dqn_bundle(env, config, self.streams["init"])
        self.optimizers = {
            "q": Optimizer(config.optim, self.bundle.q),
            "delta": Optimizer(config.optim, self.bundle.delta),
        }
        self.replay = ReplayBuffer(config.replay_capacity)
        self.belief_builder = BeliefBuilder(
            kind=config.belief_kind,
            eps=config.train_eps,
            n=config.neighborhood,
            bounds=env.bounds,
            surrogate_steps=config.surrogate_steps,
            use_cache=config.belief_cache,
        )
        self.total_steps = 0
        self.iteration = 0
        self.state = None
        self.episode_return = 0.0

    def explore_rate(self):
        config = self.config
        fraction = min(self.total_steps / max(config.explore_steps, 1), 1.0)
        span = config.explore_end - config.explore_start
        return config.explore_start + fraction * span

    def _reset_env(self):
        self.state = self.env.reset(int(self.streams["env"].integers(2**31)))
        self.episode_return = 0.0
        if self.adversary is not None:
            self.adversary.reset()

    def step(self):
        """Run one iteration of environment steps and updates."""
        bundle, config = self.bundle, self.config
        policy = ScoreDifferencePolicy(bundle.q, bundle.delta, config.effective_lambda)
        self.belief_builder.reset_policy()
        self.last_beliefs = []
        returns, deltas, losses = [], [], []
        if self.state is None:
            self._reset_env()
        for _ in range(config.steps_per_iteration):
            state = self.state
            observed = state
            if self.adversary is not None:
                observed = self.adversary(policy, state, self.env)
            action = dqn_action(
                bundle.q,
                bundle.delta,
                observed,
                config.effective_lambda,
                self.explore_rate(),
                self.streams["action"],
            )
            delta_r = 0.0
            if not self.belief_builder.trivial:
                belief = self.belief_builder.build(
                    policy, observed, self.streams["belief"]
                )
                delta_r = immediate_counterfactual_error(
                    self.env, observed, action, belief
                )
                if self.debug_belief:
                    self.last_beliefs.append(
                        dict(belief.to_dict(), step=self.total_steps, delta_r=delta_r)
                    )
            next_state, reward, done = self.env.step(action)
            terminal = done and not self.env.truncated
            self.replay.add(
                ReplayEntry(observed, action, reward, next_state, delta_r, terminal)
            )
            deltas.append(delta_r)
            self.episode_return += reward
            self.total_steps += 1
            self.state = next_state
            if done:
                returns.append(self.episode_return)
                self._reset_env()
            if (
                self.total_steps >= config.learning_starts
                and len(self.replay) >= config.minibatch
            ):
                batch = self.replay.sample(config.minibatch, self.streams["minibatch"])
                result = dqn_update(
                    bundle.q,
                    bundle.delta,
                    (bundle.q_target, bundle.delta_target),
                    batch,
                    config,
                    self.optimizers,
                    self.total_steps,
                )
                if result is not None:
                    losses.append(result)
            if self.total_steps % config.target_sync == 0:
                bundle.q_target.load_from(bundle.q)
                bundle.delta_target.load_from(bundle.delta)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "mean_return": float(np.mean(returns)) if returns else 0.0,
            "mean_delta_r": float(np.mean(deltas)),
            "episodes": len(returns),
            "q_loss": float(np.mean([r["q_loss"] for r in losses])) if losses else 0.0,
            "delta_loss": (
                float(np.mean([r["delta_loss"] for r in losses])) if losses else 0.0
            ),
        }
        logger.debug(f"DQN iteration {self.iteration}: {row}")
        return row

    def run(self, iterations=None, callback=None):
        remaining = (iterations or self.config.iterations) - self.iteration
        rows = []
        progress = tqdm(
            range(max(remaining, 0)),
            desc=self.config.algo,
            disable=not settings.PROGRESS,
        )
        for _ in progress:
            row = self.step()
            rows.append(row)
            if callback is not None:
                callback(self, row)
        return rows


def train_dqn(env, config, adversary=None):
    """Train a (delta-)DQN agent for `config.iterations` iterations."""
    trainer = DQNTrainer(env, config, adversary)
    trainer.run()
    return trainer.bundle
