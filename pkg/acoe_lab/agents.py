"""delta-PPO training, shared rollout collection and frozen-policy evaluation."""

import copy
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from loguru import logger
from tqdm import tqdm

from . import settings
from .attacks import Adversary, AttackSpec
from .belief import BeliefBuilder, immediate_counterfactual_error
from .diffnet import (
    ClippedSurrogate,
    DiffNet,
    Optimizer,
    OptimizerConfig,
    ScoreDifferencePolicy,
    SquaredError,
)
from .errors import ContractViolation, NonFiniteError

ALGORITHMS = ("ppo", "delta-ppo", "dqn", "delta-dqn")
ADVANTAGE_STD_FLOOR = 1e-8


class RngStreams:
    """
    Named random streams derived from one root seed.

    A stream depends only on (root seed, name), so drawing from one never shifts
    another.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def __getitem__(self, name):
        if name not in self._streams:
            key = zlib.crc32(name.encode())
            self._streams[name] = np.random.default_rng([self.seed, key])
        return self._streams[name]

    def ensure(self, *names):
        for name in names:
            self[name]

    def state(self):
        return {
            name: copy.deepcopy(rng.bit_generator.state)
            for name, rng in sorted(self._streams.items())
        }

    def load_state(self, states):
        for name, state in states.items():
            self[name].bit_generator.state = copy.deepcopy(state)


@dataclass(frozen=True)
class TrainConfig:
    """
    Training hyperparameters shared by the PPO and DQN families.

    Attributes:
        algo (str): "ppo", "delta-ppo", "dqn" or "delta-dqn".
        lam (float): Robustness weight on the counterfactual error.
        gamma (float): Discount.
        gae_lambda (float): GAE trace parameter.
        clip (float): PPO clip ratio.
        epochs (int): PPO epochs per iteration.
        minibatch (int): Minibatch size.
        iterations (int): Training iterations.
        steps_per_iteration (int): Environment steps per iteration and worker.
        workers (int): Rollout workers.
        optim (OptimizerConfig): Optimizer settings for every network.
        replay_capacity (int): DQN replay size.
        target_sync (int): DQN target-network sync period K in steps.
        learning_starts (int): DQN steps before the first update.
        explore_start (float): Initial epsilon-greedy rate.
        explore_end (float): Final epsilon-greedy rate.
        explore_steps (int): Steps of the linear exploration schedule.
        q_target (str): "max" (standard) or "min" bootstrap of the Q target.
        train_eps (float): Neighborhood radius of the belief.
        belief (str): "none", "a2b" or "a3b".
        neighborhood (int): Sampled belief particles.
        surrogate_steps (int): PGD iterations of the A3B surrogate.
        belief_cache (bool): Memoize A3B surrogate attacks.
        seed (int): Root seed.
        hidden_sizes (tuple): Hidden widths of every network.
        normalize_advantages (bool): Standardize combined advantages per batch.
        delta_bootstrap (str): "delta" or "zero" tail of truncated C-ACoE sums.
    """

    algo: str = "delta-ppo"
    lam: float = settings.ROBUSTNESS_LAMBDA
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    iterations: int = 10
    steps_per_iteration: int = 200
    workers: int = 1
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    replay_capacity: int = 10_000
    target_sync: int = 100
    learning_starts: int = 200
    explore_start: float = 1.0
    explore_end: float = 0.05
    explore_steps: int = 1000
    q_target: str = "max"
    train_eps: float = settings.TRAIN_ATTACK_EPS
    belief: str = "a3b"
    neighborhood: int = settings.NEIGHBORHOOD_SIZE
    surrogate_steps: int = settings.A3B_SURROGATE_STEPS
    belief_cache: bool = False
    seed: int = 0
    hidden_sizes: tuple = settings.HIDDEN_SIZES
    normalize_advantages: bool = True
    delta_bootstrap: str = "delta"

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ContractViolation(f"Unknown algorithm: {self.algo}")
        if self.lam < 0:
            raise ContractViolation("Robustness weight must be >= 0")
        if not 0 < self.clip < 1 or not 0 <= self.gamma < 1:
            raise ContractViolation("Need clip in (0, 1) and gamma in [0, 1)")
        positive = ("epochs", "minibatch", "steps_per_iteration", "workers")
        positive += ("replay_capacity", "target_sync", "neighborhood")
        for name in positive:
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.q_target not in ("max", "min"):
            raise ContractViolation("q_target must be 'max' or 'min'")
        if self.delta_bootstrap not in ("delta", "zero"):
            raise ContractViolation("delta_bootstrap must be 'delta' or 'zero'")
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))

    @property
    def robust(self):
        return self.algo.startswith("delta-")

    @property
    def effective_lambda(self):
        return self.lam if self.robust else 0.0

    @property
    def belief_kind(self):
        return self.belief if self.robust else "none"

    def to_dict(self):
        data = asdict(self)
        data["hidden_sizes"] = list(self.hidden_sizes)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if isinstance(data.get("optim"), dict):
            data["optim"] = OptimizerConfig(**data["optim"])
        return cls(**data)


@dataclass(eq=False)
class Trajectory:
    """
    One contiguous piece of an episode collected by a single worker.

    Attributes:
        observations (np.ndarray): Observations the agent acted on.
        actions (np.ndarray): Actions taken.
        log_probs (np.ndarray): Behavior log-probabilities.
        rewards (np.ndarray): Rewards received.
        values (np.ndarray): V(s_t) at collection time.
        deltas (np.ndarray): Immediate counterfactual errors delta_R.
        dones (np.ndarray): Done flag per step.
        terminal (bool): Whether the piece ends in a terminal state.
        final_observation (np.ndarray): Observation after the last step.
        bootstrap_value (float): V of the final observation (0 when terminal).
        bootstrap_delta (float): delta net at the final observation, or 0.
        beliefs (list | None): Per-step belief dumps when requested.
    """

    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    deltas: np.ndarray
    dones: np.ndarray
    terminal: bool = True
    final_observation: np.ndarray | None = None
    bootstrap_value: float = 0.0
    bootstrap_delta: float = 0.0
    beliefs: list | None = None
    returns_to_go: np.ndarray | None = None
    delta_to_go: np.ndarray | None = None
    advantages: np.ndarray | None = None
    combined: np.ndarray | None = None

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, float))
        for name in ("log_probs", "rewards", "values", "deltas"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.dones = np.asarray(self.dones, dtype=bool)
        self.actions = np.asarray(self.actions)
        names = ("observations", "actions", "log_probs", "rewards", "values")
        lengths = {len(getattr(self, name)) for name in names + ("deltas", "dones")}
        if len(lengths) != 1:
            raise ContractViolation(f"Inconsistent trajectory field lengths {lengths}")

    def __len__(self):
        return len(self.rewards)

    @property
    def episode_complete(self):
        return bool(len(self) and self.dones[-1])


def discounted_sum(terms, gamma, bootstrap=0.0):
    """x_t = u_t + gamma * x_{t+1}, seeded with x_T = bootstrap."""
    out = np.empty(len(terms))
    running = float(bootstrap)
    for t in range(len(terms) - 1, -1, -1):
        running = terms[t] + gamma * running
        out[t] = running
    return out


def compute_to_go(trajectory, gamma):
    """Rewards-to-go and C-ACoE-to-go, bootstrapped at truncation."""
    value_tail = 0.0 if trajectory.terminal else trajectory.bootstrap_value
    delta_tail = 0.0 if trajectory.terminal else trajectory.bootstrap_delta
    returns = discounted_sum(trajectory.rewards, gamma, value_tail)
    deltas = discounted_sum(trajectory.deltas, gamma, delta_tail)
    return returns, deltas


def gae_advantage(trajectory, gamma, gae_lambda, value_net=None):
    """
    Generalized advantage estimates over TD residuals.

    Args:
        trajectory (Trajectory): Collected piece.
        gamma (float): Discount.
        gae_lambda (float): Trace parameter.
        value_net (DiffNet | None): Recompute values with this net when given.

    Returns:
        np.ndarray: Advantage per step.
    """

    values = trajectory.values
    tail = 0.0 if trajectory.terminal else trajectory.bootstrap_value
    if value_net is not None:
        values = np.atleast_2d(value_net(trajectory.observations))[:, 0]
        if not trajectory.terminal:
            tail = float(value_net(trajectory.final_observation)[0])
    next_values = np.append(values[1:], tail)
    residuals = trajectory.rewards + gamma * next_values - values
    return discounted_sum(residuals, gamma * gae_lambda)


def acoe_advantage(advantages, delta_to_go, lam):
    """Combined advantage A_c = A - lam * delta_to_go."""
    advantages = np.asarray(advantages, dtype=np.float64)
    delta_to_go = np.asarray(delta_to_go, dtype=np.float64)
    if advantages.shape != delta_to_go.shape:
        raise ContractViolation(
            f"Advantage shape {advantages.shape} != C-ACoE shape {delta_to_go.shape}"
        )
    return advantages - lam * delta_to_go


def prepare_trajectory(trajectory, config):
    """Fill in the derived to-go and advantage fields in place."""
    returns, deltas = compute_to_go(trajectory, config.gamma)
    trajectory.returns_to_go = returns
    trajectory.delta_to_go = deltas
    trajectory.advantages = gae_advantage(trajectory, config.gamma, config.gae_lambda)
    trajectory.combined = acoe_advantage(
        trajectory.advantages, deltas, config.effective_lambda
    )
    return trajectory


def _scalar(net, observation):
    return 0.0 if net is None else float(net(observation)[0])


def _collect_worker(
    policy,
    env,
    adversary,
    belief_builder,
    T,
    value_net,
    delta_net,
    streams,
    suffix,
    debug_belief,
    delta_bootstrap,
):
    action_rng = streams[f"action{suffix}"]
    belief_rng = streams[f"belief{suffix}"]
    env_rng = streams[f"env{suffix}"]
    trajectories = []
    state = env.reset(int(env_rng.integers(2**31)))
    if adversary is not None:
        adversary.reset()
    steps = {key: [] for key in ("obs", "act", "logp", "rew", "val", "dlt", "done")}
    dumps = [] if debug_belief else None
    for t in range(T):
        observed = state if adversary is None else adversary(policy, state, env)
        dist = policy.distribution(observed)
        action = dist.sample(action_rng)
        if belief_builder is None or belief_builder.trivial:
            delta_r = 0.0
            belief = None
        else:
            belief = belief_builder.build(policy, observed, belief_rng)
            delta_r = immediate_counterfactual_error(env, observed, action, belief)
        if dumps is not None and belief is not None:
            dumps.append(dict(belief.to_dict(), step=t, delta_r=delta_r))
        state, reward, done = env.step(action)
        steps["obs"].append(observed)
        steps["act"].append(action)
        steps["logp"].append(dist.log_prob(action))
        steps["rew"].append(reward)
        steps["val"].append(_scalar(value_net, observed))
        steps["dlt"].append(delta_r)
        steps["done"].append(done)
        if done or t == T - 1:
            terminal = bool(done and not env.truncated)
            tail_delta = 0.0
            if not terminal and delta_bootstrap == "delta":
                tail_delta = _scalar(delta_net, state)
            trajectories.append(
                Trajectory(
                    observations=np.array(steps["obs"]),
                    actions=np.array(steps["act"]),
                    log_probs=steps["logp"],
                    rewards=steps["rew"],
                    values=steps["val"],
                    deltas=steps["dlt"],
                    dones=steps["done"],
                    terminal=terminal,
                    final_observation=np.array(state),
                    bootstrap_value=0.0 if terminal else _scalar(value_net, state),
                    bootstrap_delta=tail_delta,
                    beliefs=dumps,
                )
            )
            steps = {key: [] for key in steps}
            dumps = [] if debug_belief else None
            if done and t < T - 1:
                state = env.reset(int(env_rng.integers(2**31)))
                if adversary is not None:
                    adversary.reset()
    return trajectories


def collect_rollouts(
    policy,
    env,
    adversary=None,
    belief_builder=None,
    T=200,
    workers=1,
    value_net=None,
    delta_net=None,
    streams=None,
    debug_belief=False,
    delta_bootstrap="delta",
):
    """
    Collect T steps per worker, splitting into per-episode trajectories.

    Each worker runs on its own copy of the environment and its own named RNG
    streams; results are ordered by worker index.

    Args:
        policy: Acting policy (DiffNet or ScoreDifferencePolicy).
        env (Env): Environment; copied for every worker beyond the first.
        adversary (Adversary | None): Perturbs the observations the agent acts on.
        belief_builder (BeliefBuilder | None): Source of delta_R.
        T (int): Steps per worker.
        workers (int): Worker count.
        value_net (DiffNet | None): Value network for V estimates.
        delta_net (DiffNet | None): delta network for truncation bootstraps.
        streams (RngStreams | None): Random streams; seed 0 when omitted.
        debug_belief (bool): Attach per-step belief dumps.
        delta_bootstrap (str): "delta" or "zero" tail of truncated C-ACoE sums.

    Returns:
        list[Trajectory]: Trajectories of all workers.
    """

    streams = streams if streams is not None else RngStreams(0)
    if workers == 1:
        return _collect_worker(
            policy,
            env,
            adversary,
            belief_builder,
            T,
            value_net,
            delta_net,
            streams,
            "",
            debug_belief,
            delta_bootstrap,
        )

    def job(worker):
        return _collect_worker(
            policy,
            copy.deepcopy(env),
            copy.deepcopy(adversary),
            belief_builder,
            T,
            value_net,
            delta_net,
            streams,
            f"/{worker}",
            debug_belief,
            delta_bootstrap,
        )

    for worker in range(workers):
        streams.ensure(*(f"{name}/{worker}" for name in ("action", "belief", "env")))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        results = list(executor.map(job, range(workers)))
    return [trajectory for batch in results for trajectory in batch]


@dataclass(eq=False)
class PolicyBundle:
    """
    Networks of a trained agent together with its training configuration.

    PPO agents carry policy/value/delta; DQN agents carry q/delta and the two
    target networks.
    """

    config: TrainConfig
    policy: DiffNet | None = None
    value: DiffNet | None = None
    delta: DiffNet | None = None
    q: DiffNet | None = None
    q_target: DiffNet | None = None
    delta_target: DiffNet | None = None

    @property
    def algo(self):
        return self.config.algo

    @property
    def acting_policy(self):
        """The policy that selects actions, as seen by attacks and beliefs."""
        if self.q is not None:
            lam = self.config.effective_lambda
            return ScoreDifferencePolicy(self.q, self.delta, lam)
        return self.policy

    def networks(self):
        names = ("policy", "value", "delta", "q", "q_target", "delta_target")
        return {name: getattr(self, name) for name in names if getattr(self, name)}


def build_ppo_bundle(env, config, rng):
    """Initialize policy, value and delta networks from the init stream."""
    hidden = list(config.hidden_sizes)
    if env.discrete:
        head, out = "categorical", env.n_actions
    else:
        head, out = "gaussian", env.action_dim
    sizes = [env.obs_dim, *hidden, out]
    policy = DiffNet.build(sizes, rng, head=head, output_scale=0.01)
    value = DiffNet.build([env.obs_dim, *hidden, 1], rng)
    delta = DiffNet.build([env.obs_dim, *hidden, 1], rng)
    return PolicyBundle(config=config, policy=policy, value=value, delta=delta)


def ppo_update(
    policy, value_net, delta_net, trajectories, config, optimizers, rng, iteration=None
):
    """
    Clipped-surrogate update of the policy and regressions of V and delta.

    One permutation per epoch is shared by all three networks.

    Args:
        policy (DiffNet): Policy network, updated in place.
        value_net (DiffNet): Value network, regressed to rewards-to-go.
        delta_net (DiffNet): delta network, regressed to C-ACoE-to-go.
        trajectories (list[Trajectory]): Prepared trajectories.
        config (TrainConfig): Hyperparameters.
        optimizers (dict): "policy", "value" and "delta" optimizers.
        rng (np.random.Generator): Minibatch stream.
        iteration (int | None): Iteration counter for diagnostics.

    Returns:
        dict: Mean losses of the update.

    Raises:
        NonFiniteError: When a loss or gradient turns non-finite.
    """

    if not trajectories or not sum(len(t) for t in trajectories):
        raise ContractViolation("ppo_update needs a nonempty batch")
    observations = np.concatenate([t.observations for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    old_log_probs = np.concatenate([t.log_probs for t in trajectories])
    combined = np.concatenate([t.combined for t in trajectories])
    returns = np.concatenate([t.returns_to_go for t in trajectories])
    deltas = np.concatenate([t.delta_to_go for t in trajectories])
    if config.normalize_advantages:
        combined = (combined - combined.mean()) / (combined.std() + ADVANTAGE_STD_FLOOR)
    n = len(combined)
    losses = {"policy_loss": [], "value_loss": [], "delta_loss": []}
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.minibatch):
                idx = order[start : start + config.minibatch]
                x = observations[idx]
                surrogate = ClippedSurrogate(
                    actions[idx], old_log_probs[idx], combined[idx], config.clip
                )
                for name, net, loss in (
                    ("policy", policy, surrogate),
                    ("value", value_net, SquaredError(returns[idx].reshape(-1, 1))),
                    ("delta", delta_net, SquaredError(deltas[idx].reshape(-1, 1))),
                ):
                    value, grads = net.value_and_param_gradient(x, loss, iteration)
                    optimizers[name].step(net, grads, iteration)
                    losses[f"{name}_loss"].append(value)
    except NonFiniteError as e:
        logger.error(f"PPO update aborted at iteration {iteration}: {e}")
        raise
    return {key: float(np.mean(values)) for key, values in losses.items()}


class PPOTrainer:
    """
    Iterative delta-PPO trainer; vanilla PPO is the lam = 0, no-belief case.

    Attributes:
        env (Env): Training environment.
        config (TrainConfig): Hyperparameters.
        bundle (PolicyBundle): Networks being trained.
        optimizers (dict): One optimizer per network.
        streams (RngStreams): Named random streams.
        iteration (int): Completed iterations.
        adversary (Adversary | None): Training-time observation adversary.
    """

    def __init__(self, env, config, adversary=None, debug_belief=False):
        self.env = env
        self.config = config
        self.streams = RngStreams(config.seed)
        self.bundle = build_ppo_bundle(env, config, self.streams["init"])
        optim = config.optim
        if optim.anneal == "linear" and optim.total_steps == 0:
            batch = config.steps_per_iteration * config.workers
            per_epoch = math.ceil(batch / config.minibatch)
            updates = config.iterations * config.epochs * per_epoch
            optim = replace(optim, total_steps=updates)
        self.optimizers = {
            name: Optimizer(optim, getattr(self.bundle, name))
            for name in ("policy", "value", "delta")
        }
        self.belief_builder = BeliefBuilder(
            kind=config.belief_kind,
            eps=config.train_eps,
            n=config.neighborhood,
            bounds=env.bounds,
            surrogate_steps=config.surrogate_steps,
            use_cache=config.belief_cache,
        )
        self.adversary = adversary
        self.debug_belief = debug_belief
        self.iteration = 0
        self.last_trajectories = []

    def step(self):
        """Run one collect/prepare/update iteration and return its stats row."""
        bundle, config = self.bundle, self.config
        self.belief_builder.reset_policy()
        trajectories = collect_rollouts(
            bundle.policy,
            self.env,
            self.adversary,
            self.belief_builder,
            config.steps_per_iteration,
            config.workers,
            bundle.value,
            bundle.delta,
            self.streams,
            self.debug_belief,
            config.delta_bootstrap,
        )
        for trajectory in trajectories:
            prepare_trajectory(trajectory, config)
        losses = ppo_update(
            bundle.policy,
            bundle.value,
            bundle.delta,
            trajectories,
            config,
            self.optimizers,
            self.streams["minibatch"],
            self.iteration,
        )
        self.iteration += 1
        self.last_trajectories = trajectories
        row = {"iteration": self.iteration, **rollout_stats(trajectories), **losses}
        logger.debug(f"PPO iteration {self.iteration}: {row}")
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


def rollout_stats(trajectories):
    """Mean episodic return, mean delta_R and mean C-ACoE-to-go of a batch."""
    complete = [t for t in trajectories if t.episode_complete]
    pieces = complete or trajectories
    deltas = np.concatenate([t.deltas for t in trajectories])
    to_go = [t.delta_to_go for t in trajectories if t.delta_to_go is not None]
    return {
        "mean_return": float(np.mean([t.rewards.sum() for t in pieces])),
        "mean_delta_r": float(deltas.mean()),
        "mean_delta_to_go": float(np.concatenate(to_go).mean()) if to_go else 0.0,
        "episodes": len(complete),
    }


def train_ppo(env, config, adversary=None):
    """Train a (delta-)PPO agent for `config.iterations` iterations."""
    trainer = PPOTrainer(env, config, adversary)
    trainer.run()
    return trainer.bundle


@dataclass
class EvalResult:
    """
    Evaluation records for one attack.

    Attributes:
        attack (str): Attack label.
        records (list[dict]): One record per episode.
    """

    attack: str
    records: list

    @property
    def returns(self):
        return np.array([record["return"] for record in self.records])

    @property
    def mean(self):
        return float(self.returns.mean()) if self.records else 0.0

    @property
    def std(self):
        return float(self.returns.std()) if self.records else 0.0

    def summary(self):
        return {
            "attack": self.attack,
            "mean": self.mean,
            "std": self.std,
            "episodes": len(self.records),
        }


def attack_stream(seed, episode):
    """Random stream of the adversary in episode `episode` of evaluation seed `seed`."""
    return np.random.default_rng([int(seed), int(episode), zlib.crc32(b"attack")])


def run_episode(policy, env, adversary, seed):
    """Play one greedy episode and return its record."""
    state = env.reset(seed)
    adversary.reset()
    total, length, attacked = 0.0, 0, 0
    done = False
    while not done:
        observed = adversary(policy, state, env)
        attacked += int(not np.array_equal(observed, state))
        state, reward, done = env.step(policy.distribution(observed).mode())
        total += reward
        length += 1
    return {"return": total, "length": length, "attacked_steps": attacked}


def evaluate(
    policy_bundle, env, adversary=None, episodes=50, seeds=(0,), learned=None, workers=1
):
    """
    Evaluate a frozen agent under one adversary.

    Episode e of seed s resets the environment with seed (s, e) and gives the
    adversary its own stream, so every record is reproducible on its own.

    Args:
        policy_bundle (PolicyBundle | DiffNet): Agent or bare policy.
        env (Env): Environment template; copied per parallel episode.
        adversary (AttackSpec | None): Attack to apply; identity when None.
        episodes (int): Episodes per seed.
        seeds (Iterable[int]): Evaluation seeds.
        learned (LearnedAdversary | None): Trained adversary for "learned".
        workers (int): Parallel episodes.

    Returns:
        EvalResult: Per-episode records.
    """

    policy = getattr(policy_bundle, "acting_policy", policy_bundle)
    spec = adversary if adversary is not None else AttackSpec()
    jobs = [(seed, episode) for seed in seeds for episode in range(episodes)]

    def job(item, environment):
        seed, episode = item
        rng = attack_stream(seed, episode)
        attacker = Adversary(
            spec, environment.bounds, environment.horizon, rng, learned
        )
        record = run_episode(policy, environment, attacker, [seed, episode])
        return {"attack": spec.label, "seed": seed, "episode": episode, **record}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(
                executor.map(lambda item: job(item, copy.deepcopy(env)), jobs)
            )
    else:
        records = [job(item, env) for item in jobs]
    result = EvalResult(spec.label, records)
    logger.info(f"Evaluated {spec.label}: {result.mean:.4f} +- {result.std:.4f}")
    return result
