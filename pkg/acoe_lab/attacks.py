"""Observation-perturbation adversaries bounded in the L-infinity norm."""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from loguru import logger

from . import settings
from .diffnet import KLToFixed, NegLogProb, kl_divergence
from .errors import ContractViolation, NonFiniteError

ATTACK_KINDS = ("identity", "fgsm", "pgd", "mad", "timed", "critical-point", "learned")
FLAG_ALIASES = {"k": "steps", "n": "depth", "N": "depth", "budget": "budget_fraction"}


@dataclass(frozen=True)
class AttackSpec:
    """
    Declarative description of an adversary.

    Attributes:
        kind (str): One of ATTACK_KINDS.
        eps (float): L-infinity budget.
        steps (int): Iterations for pgd and mad.
        alpha (float | None): Step size; defaults to eps * PGD_STEP_FRACTION.
        loss (str): Surrogate loss for fgsm/pgd ("nll" of the greedy action).
        threshold (float): Preference-gap threshold of the timed attack.
        budget_fraction (float): Fraction of the horizon the timed attack may use.
        base (str): Myopic attack used by timed and critical-point.
        depth (int): Lookahead depth N of critical-point.
        branches (int): Candidate count of critical-point.
        directions (int): Direction count m of the learned adversary.
        random_start (bool): Start pgd/mad from a uniform point in the ball.
    """

    kind: str = "identity"
    eps: float = 0.0
    steps: int = 10
    alpha: float | None = None
    loss: str = "nll"
    threshold: float = 0.0
    budget_fraction: float = 1.0
    base: str = "pgd"
    depth: int = 0
    branches: int = 4
    directions: int = 5
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractViolation(f"Unknown attack kind: {self.kind}")
        if self.eps < 0 or self.steps < 1 or self.depth < 0 or self.branches < 1:
            raise ContractViolation(
                "Attack needs eps >= 0, steps >= 1, depth >= 0 and branches >= 1"
            )
        if self.alpha is not None and self.alpha <= 0:
            raise ContractViolation("Attack step size must be positive")
        if self.loss != "nll":
            raise ContractViolation(f"Unknown attack loss: {self.loss}")
        if self.base not in ("fgsm", "pgd", "mad"):
            raise ContractViolation(f"Base attack must be myopic, got {self.base}")

    @property
    def label(self):
        if self.kind == "identity":
            return "identity"
        return f"{self.kind}:eps={self.eps:g}"

    @classmethod
    def parse(cls, text):
        """
        Parse a flag such as `kind=pgd,eps=0.1,k=10` or `mad:eps=0.15`.

        Raises:
            ContractViolation: On unknown keys or malformed values.
        """

        text = text.strip()
        values = {}
        if ":" in text.split(",")[0] or "=" not in text.split(",")[0]:
            head, _, text = text.partition(":")
            values["kind"] = head.strip()
        known = {f.name for f in fields(cls)}
        for item in filter(None, (part.strip() for part in text.split(","))):
            key, sep, raw = item.partition("=")
            key = FLAG_ALIASES.get(key.strip(), key.strip())
            if not sep or key not in known:
                raise ContractViolation(f"Malformed attack flag item: {item!r}")
            values[key] = raw.strip()
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, data):
        data = {FLAG_ALIASES.get(key, key): value for key, value in dict(data).items()}
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            try:
                if f.name in ("kind", "loss", "base"):
                    kwargs[f.name] = str(value)
                elif f.name == "random_start":
                    kwargs[f.name] = str(value).lower() in ("1", "true", "yes", "on")
                elif f.name in ("steps", "depth", "branches", "directions"):
                    kwargs[f.name] = int(value)
                elif f.name == "alpha" and value is None:
                    kwargs[f.name] = None
                else:
                    kwargs[f.name] = float(value)
            except (TypeError, ValueError) as e:
                raise ContractViolation(f"Bad value for attack field {f.name}: {e}")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ContractViolation(f"Unknown attack fields: {sorted(unknown)}")
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)

    def step_size(self):
        return default_step_size(self.eps) if self.alpha is None else self.alpha


def default_step_size(eps):
    """Step size used when none is given; the same for every iteration count."""
    return settings.PGD_STEP_FRACTION * eps


def _box(s, eps, bounds):
    low, high = s - eps, s + eps
    if bounds is not None:
        low, high = np.maximum(low, bounds.low), np.minimum(high, bounds.high)
    return low, high


def _greedy_loss(policy, s):
    """Negative log-probability of the policy's greedy action at the clean point."""
    dist = policy.distribution(s)
    action = dist.mode()
    if dist.kind == "gaussian":
        return NegLogProb(np.asarray(action).reshape(1, -1))
    return NegLogProb(np.array([action]))


def _input_gradient(policy, x, loss, step=None):
    _, grad = policy.value_and_input_gradient(x, loss, step)
    if not np.all(np.isfinite(grad)):
        logger.error(f"Non-finite input gradient of {loss.name} at {x}")
        raise NonFiniteError(f"{loss.name} input gradient", float("nan"), step)
    return grad


def attack_identity(s):
    return np.array(s, dtype=np.float64, copy=True)


def attack_fgsm(policy, s, eps, bounds=None):
    """
    One signed-gradient step of size eps on the greedy-action NLL.

    Args:
        policy: Object exposing `distribution` and `value_and_input_gradient`.
        s (np.ndarray): Clean observation.
        eps (float): L-infinity budget.
        bounds (Bounds | None): Observation bounds to clip into.

    Returns:
        np.ndarray: Perturbed observation.
    """

    s = attack_identity(s)
    if eps < 0:
        raise ContractViolation("eps must be nonnegative")
    if eps == 0:
        return s
    grad = _input_gradient(policy, s, _greedy_loss(policy, s))
    low, high = _box(s, eps, bounds)
    return np.clip(s + eps * np.sign(grad), low, high)


def attack_pgd(
    policy, s, eps, k=10, alpha=None, random_start=False, rng=None, bounds=None
):
    """
    Projected signed-gradient ascent on the greedy-action NLL.

    Without a random start the first iterate is the full-eps FGSM step; later
    iterates move by `alpha`, a fixed fraction of eps unless given. The iterate with
    the highest loss is returned.
    """

    s = attack_identity(s)
    if k < 1 or eps < 0:
        raise ContractViolation("PGD needs k >= 1 and eps >= 0")
    if eps == 0:
        return s
    alpha = default_step_size(eps) if alpha is None else alpha
    if alpha <= 0:
        raise ContractViolation("PGD step size must be positive")
    loss = _greedy_loss(policy, s)
    low, high = _box(s, eps, bounds)
    x = s.copy()
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = low + (high - low) * rng.random(s.size)
    best, best_loss = None, -math.inf
    for i in range(k):
        grad = _input_gradient(policy, x, loss, i)
        size = eps if i == 0 and not random_start else alpha
        x = np.clip(x + size * np.sign(grad), low, high)
        value = policy.loss_value(x, loss)
        if value > best_loss:
            best, best_loss = x.copy(), value
    return best


def attack_mad(
    policy,
    s,
    eps=settings.MAD_EVAL_EPS,
    k=settings.MAD_EVAL_STEPS,
    alpha=None,
    random_start=False,
    rng=None,
    bounds=None,
):
    """
    Maximal action-distribution attack: ascend KL(pi(s) || pi(x)) over the ball.

    The KL gradient vanishes at x = s, so the first iterate is the FGSM step (or
    a uniform random start); the iterate with the largest KL is returned.
    """

    s = attack_identity(s)
    if k < 1 or eps < 0:
        raise ContractViolation("MAD needs k >= 1 and eps >= 0")
    if eps == 0:
        return s
    alpha = default_step_size(eps) if alpha is None else alpha
    clean = policy.distribution(s)
    loss = KLToFixed(clean)
    low, high = _box(s, eps, bounds)
    if random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x = low + (high - low) * rng.random(s.size)
    else:
        x = attack_fgsm(policy, s, eps, bounds)
    best = x.copy()
    best_kl = kl_divergence(clean, policy.distribution(x))
    for i in range(1, k):
        grad = _input_gradient(policy, x, loss, i)
        x = np.clip(x + alpha * np.sign(grad), low, high)
        value = kl_divergence(clean, policy.distribution(x))
        if value > best_kl:
            best, best_kl = x.copy(), value
    return best


def attack_timed(policy, s, base_attack, threshold, budget_used, budget_max):
    """
    Attack only where the action-preference gap exceeds the threshold.

    Returns:
        tuple: (observation, whether the step was attacked).
    """

    gap = policy.distribution(s).preference_gap()
    if gap > threshold and budget_used < budget_max:
        return base_attack(policy, s), True
    return attack_identity(s), False


def critical_point_candidates(s, attacked, eps, bounds=None):
    """No-attack, base-attack output, then s +- eps along each axis."""
    s = attack_identity(s)
    candidates = [s, np.asarray(attacked, dtype=np.float64)]
    low, high = _box(s, eps, bounds)
    for axis in range(s.size):
        for sign in (1.0, -1.0):
            corner = s.copy()
            corner[axis] += sign * eps
            candidates.append(np.clip(corner, low, high))
    return candidates


def rollout_return(policy, env, first_observation, depth):
    """Undiscounted return of `depth` greedy steps, starting from a perturbed view."""
    total = 0.0
    observation = first_observation
    for _ in range(depth):
        action = policy.distribution(observation).mode()
        observation, reward, done = env.step(action)
        total += reward
        if done:
            break
    return total


def attack_critical_point(policy, env, s, base_attack, depth, branches, eps):
    """
    Pick the candidate perturbation whose N-step lookahead hurts the victim most.

    The environment is snapshotted before and restored after every branch, so the
    caller's episode is untouched. Ties keep the earliest candidate.

    Raises:
        ContractViolation: If the environment cannot snapshot its state.
    """

    attacked = base_attack(policy, s)
    if depth == 0:
        return attacked
    if not callable(getattr(env, "snapshot", None)) or not callable(
        getattr(env, "restore", None)
    ):
        raise ContractViolation("Critical point attack needs snapshot/restore support")
    candidates = critical_point_candidates(s, attacked, eps, env.bounds)[:branches]
    root = env.snapshot()
    best, best_score = candidates[0], math.inf
    for index, candidate in enumerate(candidates):
        score = rollout_return(policy, env, candidate, depth)
        env.restore(root)
        logger.debug(f"Critical point candidate {index}: return {score:.6f}")
        if score < best_score:
            best, best_score = candidate, score
    return attack_identity(best)


def perturbation_directions(dim, eps, m):
    """The m directions {0, +eps e_0, -eps e_0, +eps e_1, ...}, in that order."""
    directions = [np.zeros(dim)]
    for axis in range(dim):
        for sign in (1.0, -1.0):
            direction = np.zeros(dim)
            direction[axis] = sign * eps
            directions.append(direction)
    if not 1 <= m <= len(directions):
        raise ContractViolation(f"Direction count must be in 1..{len(directions)}")
    return directions[:m]


class AdversaryEnv:
    """
    Environment seen by a learned adversary.

    Its observation is the true state, its actions pick a perturbation direction,
    the victim acts greedily on the perturbed observation and the adversary is
    rewarded with 1 - victim reward.
    """

    discrete = True

    def __init__(self, env, victim, directions):
        self.env = env
        self.victim = victim
        self.directions = directions
        self.n_actions = len(directions)
        self.action_dim = 1
        self.bounds = env.bounds
        self.horizon = env.horizon
        self.gamma = env.gamma

    @property
    def obs_dim(self):
        return self.env.obs_dim

    @property
    def truncated(self):
        return self.env.truncated

    def reset(self, seed):
        self.state = self.env.reset(seed)
        return self.state

    def perturb(self, state, action):
        return self.bounds.clip(state + self.directions[int(action)])

    def step(self, action):
        perturbed = self.perturb(self.state, action)
        victim_action = self.victim.distribution(perturbed).mode()
        self.state, reward, done = self.env.step(victim_action)
        return self.state, 1.0 - reward, done

    def reward_query(self, state, action):
        victim_action = self.victim.distribution(self.perturb(state, action)).mode()
        return 1.0 - self.env.reward_query(state, victim_action)

    def snapshot(self):
        return self.env.snapshot(), self.state.copy()

    def restore(self, snapshot):
        inner, state = snapshot
        self.env.restore(inner)
        self.state = state.copy()


@dataclass(eq=False)
class LearnedAdversary:
    """Categorical policy over fixed perturbation directions."""

    policy: object
    directions: list

    def __call__(self, victim, s):
        s = attack_identity(s)
        choice = int(np.argmax(self.policy.distribution(s).probs))
        return s + self.directions[choice]


def train_learned_adversary(victim, env, eps, directions_m, train_config):
    """
    Train a perturbation adversary against a frozen victim with PPO.

    Args:
        victim: Frozen victim policy.
        env (Env): Victim environment.
        eps (float): L-infinity budget of every direction.
        directions_m (int): Number of directions, the zero direction first.
        train_config (TrainConfig): PPO settings for the adversary.

    Returns:
        LearnedAdversary: The trained adversary.
    """

    from .agents import train_ppo

    directions = perturbation_directions(env.obs_dim, eps, directions_m)
    wrapper = AdversaryEnv(env, victim, directions)
    logger.info(f"Training learned adversary: eps={eps}, m={len(directions)}")
    bundle = train_ppo(wrapper, train_config)
    return LearnedAdversary(policy=bundle.policy, directions=directions)


class Adversary:
    """
    Stateful adversary applied step by step during evaluation.

    Tracks the timed attack's per-episode budget and owns the attack RNG stream.
    """

    def __init__(self, spec, bounds, horizon=100, rng=None, learned=None):
        self.spec = spec
        self.bounds = bounds
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.learned = learned
        self.budget_max = math.floor(spec.budget_fraction * horizon)
        self.budget_used = 0
        self.attacked_steps = 0
        if spec.kind == "learned" and learned is None:
            raise ContractViolation("A learned attack needs a trained adversary")

    @property
    def is_identity(self):
        return self.spec.kind == "identity" or self.spec.eps == 0

    def reset(self):
        self.budget_used = 0

    def myopic(self, kind):
        spec = self.spec

        def attack(policy, s):
            if kind == "fgsm":
                return attack_fgsm(policy, s, spec.eps, self.bounds)
            if kind == "mad":
                return attack_mad(
                    policy,
                    s,
                    spec.eps,
                    spec.steps,
                    spec.alpha,
                    spec.random_start,
                    self.rng,
                    self.bounds,
                )
            return attack_pgd(
                policy,
                s,
                spec.eps,
                spec.steps,
                spec.alpha,
                spec.random_start,
                self.rng,
                self.bounds,
            )

        return attack

    def __call__(self, policy, s, env=None):
        kind = self.spec.kind
        if self.is_identity:
            return attack_identity(s)
        if kind in ("fgsm", "pgd", "mad"):
            observation = self.myopic(kind)(policy, s)
        elif kind == "timed":
            observation, attacked = attack_timed(
                policy,
                s,
                self.myopic(self.spec.base),
                self.spec.threshold,
                self.budget_used,
                self.budget_max,
            )
            self.budget_used += int(attacked)
        elif kind == "critical-point":
            observation = attack_critical_point(
                policy,
                env,
                s,
                self.myopic(self.spec.base),
                self.spec.depth,
                self.spec.branches,
                self.spec.eps,
            )
        else:
            observation = self.learned(policy, s)
        low, high = _box(np.asarray(s), self.spec.eps, self.bounds)
        observation = np.clip(observation, low, high)
        self.attacked_steps += int(not np.array_equal(observation, s))
        return observation
