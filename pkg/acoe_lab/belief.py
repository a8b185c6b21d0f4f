"""Belief construction over the observation neighborhood and counterfactual rewards."""

from dataclasses import dataclass

import numpy as np
from loguru import logger

from . import settings
from .attacks import attack_pgd
from .diffnet import kl_divergence, softmax
from .errors import ContractViolation

BELIEF_KINDS = ("none", "a2b", "a3b")


@dataclass(frozen=True, eq=False)
class BeliefParticles:
    """
    Weighted candidate true states around an observation.

    Attributes:
        states (np.ndarray): Particle states, one per row.
        weights (np.ndarray): Nonnegative weights summing to 1.
        source (str): "a2b", "a3b" or "point-mass".
        scores (np.ndarray | None): Pre-softmax scores, when any.
    """

    states: np.ndarray
    weights: np.ndarray
    source: str
    scores: np.ndarray | None = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if weights.size != states.shape[0] or weights.size == 0:
            raise ContractViolation("One weight per particle required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > settings.PROBABILITY_ATOL:
            raise ContractViolation(f"Belief weights sum to {weights.sum()}, not 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def point_mass(cls, s):
        return cls(np.asarray(s, dtype=np.float64).reshape(1, -1), [1.0], "point-mass")

    def __len__(self):
        return self.weights.size

    def to_dict(self):
        return {
            "source": self.source,
            "states": self.states.tolist(),
            "weights": self.weights.tolist(),
            "scores": None if self.scores is None else self.scores.tolist(),
        }


def softmax_weights(scores):
    """Normalized exp(scores); unchanged when a constant is added to every score."""
    return softmax(np.asarray(scores, dtype=np.float64))


def sample_neighborhood(s_o, eps, n, rng, bounds=None):
    """
    Draw n uniform states from the eps-ball around s_o, clipped to bounds.

    Returns:
        np.ndarray: (n + 1, d) array; the last row is s_o itself.
    """

    if n < 1 or eps < 0:
        raise ContractViolation("Neighborhood needs n >= 1 and eps >= 0")
    s_o = np.asarray(s_o, dtype=np.float64).reshape(-1)
    low, high = s_o - eps, s_o + eps
    if bounds is not None:
        low, high = np.maximum(low, bounds.low), np.minimum(high, bounds.high)
    samples = low + (high - low) * rng.random((n, s_o.size))
    return np.vstack([samples, s_o])


def a2b_weights(policy, s_o, neighborhood):
    """Weights proportional to exp(KL(pi(s) || pi(s_o))) over the neighborhood."""
    neighborhood = np.atleast_2d(neighborhood)
    if neighborhood.shape[0] == 0:
        raise ContractViolation("Neighborhood must not be empty")
    reference = policy.distribution(s_o)
    scores = np.array(
        [kl_divergence(dist, reference) for dist in policy.distributions(neighborhood)]
    )
    return BeliefParticles(neighborhood, softmax_weights(scores), "a2b", scores)


def pgd_surrogate(eps, bounds=None, steps=settings.A3B_SURROGATE_STEPS):
    """Surrogate adversary used by A3B: a `steps`-step PGD attack at budget eps."""

    def surrogate(policy, s):
        return attack_pgd(policy, s, eps, k=steps, bounds=bounds)

    return surrogate


def a3b_scores(policy, s_o, neighborhood, surrogate_attack, cache=None):
    """
    Attack-aware belief: softmax of z(s) = KL(pi(s_o)||pi(s)) / KL(pi(nu(s))||pi(s)).

    The denominator is floored at 1e-8 and z is clamped to [0, 50].

    Args:
        policy: Victim policy.
        s_o (np.ndarray): Observation.
        neighborhood (np.ndarray): Candidate states, one per row.
        surrogate_attack (callable): (policy, s) -> nu(s).
        cache (SurrogateCache | None): Optional memo of surrogate outputs.

    Returns:
        BeliefParticles: Weights with the z scores attached.
    """

    neighborhood = np.atleast_2d(neighborhood)
    observed = policy.distribution(s_o)
    scores = np.zeros(neighborhood.shape[0])
    for index, (state, here) in enumerate(
        zip(neighborhood, policy.distributions(neighborhood))
    ):
        if cache is not None:
            attacked = cache.get(state, lambda s: surrogate_attack(policy, s))
        else:
            attacked = surrogate_attack(policy, state)
        numerator = kl_divergence(observed, here)
        denominator = kl_divergence(policy.distribution(attacked), here)
        denominator = max(denominator, settings.A3B_DENOMINATOR_FLOOR)
        scores[index] = min(max(numerator / denominator, 0.0), settings.A3B_SCORE_CLAMP)
    return BeliefParticles(neighborhood, softmax_weights(scores), "a3b", scores)


class SurrogateCache:
    """Surrogate attack outputs memoized by quantized state; cleared per policy."""

    def __init__(self, quantum=settings.SURROGATE_CACHE_QUANTUM):
        self.quantum = quantum
        self.entries = {}

    def get(self, state, compute):
        key = tuple(np.round(np.asarray(state) / self.quantum).astype(np.int64))
        if key not in self.entries:
            self.entries[key] = compute(state)
        return self.entries[key]

    def clear(self):
        self.entries.clear()


def belief_reward_estimate(env, belief, action):
    """Belief-weighted mean of reward queries over the particles."""
    rewards = np.array([env.reward_query(state, action) for state in belief.states])
    return float(np.clip(belief.weights @ rewards, 0.0, 1.0))


def immediate_counterfactual_error(env, s_o, action, belief):
    """delta_R = R(s_o, a) - sum_s b(s) R(s, a)."""
    return env.reward_query(s_o, action) - belief_reward_estimate(env, belief, action)


class BeliefBuilder:
    """
    Builds one belief per observation during rollouts.

    Attributes:
        kind (str): "none", "a2b" or "a3b".
        eps (float): Neighborhood radius, the training attack budget.
        n (int): Sampled particles besides the observation itself.
        bounds (Bounds | None): Observation bounds.
        surrogate_steps (int): PGD iterations of the A3B surrogate.
        cache (SurrogateCache | None): Surrogate memo, off unless requested.
    """

    def __init__(
        self,
        kind="none",
        eps=settings.TRAIN_ATTACK_EPS,
        n=settings.NEIGHBORHOOD_SIZE,
        bounds=None,
        surrogate_steps=settings.A3B_SURROGATE_STEPS,
        use_cache=False,
    ):
        if kind not in BELIEF_KINDS:
            raise ContractViolation(f"Unknown belief kind: {kind}")
        self.kind = kind
        self.eps = float(eps)
        self.n = int(n)
        self.bounds = bounds
        self.surrogate_steps = int(surrogate_steps)
        self.cache = SurrogateCache() if use_cache else None

    @property
    def trivial(self):
        """True when every belief is a point mass at the observation."""
        return self.kind == "none" or self.eps == 0

    def reset_policy(self):
        if self.cache is not None:
            self.cache.clear()

    def build(self, policy, s_o, rng):
        if self.trivial:
            return BeliefParticles.point_mass(s_o)
        neighborhood = sample_neighborhood(s_o, self.eps, self.n, rng, self.bounds)
        if self.kind == "a2b":
            return a2b_weights(policy, s_o, neighborhood)
        surrogate = pgd_surrogate(self.eps, self.bounds, self.surrogate_steps)
        belief = a3b_scores(policy, s_o, neighborhood, surrogate, self.cache)
        logger.debug(f"A3B scores at {s_o}: max z {belief.scores.max():.4f}")
        return belief
