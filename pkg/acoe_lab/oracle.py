"""
Exact finite-POMDP computations and numerical checks of the error bounds.

Observations are states (O = S); the adversary is a row-stochastic matrix
nu[s, o] and the defender acts on the current observation through pi[o, a].
"""

import itertools
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from loguru import logger

from . import settings
from .errors import (
    ContractViolation,
    ImpossibleObservation,
    TreeTooLarge,
    VerificationFailure,
)

STOCHASTIC_ATOL = 1e-12
NEIGHBOR_ATOL = 1e-12


def _check_stochastic(name, matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if np.any(matrix < 0) or not np.allclose(
        matrix.sum(axis=-1), 1.0, atol=STOCHASTIC_ATOL, rtol=0.0
    ):
        raise ContractViolation(f"{name} rows must be nonnegative and sum to 1")
    return matrix


@dataclass(eq=False)
class FinitePOMDP:
    """
    Tabular model with an observation adversary and a defender policy.

    Attributes:
        transitions (np.ndarray): T[s, a, s'].
        rewards (np.ndarray): R[s, a] in [0, 1].
        gamma (float): Discount in [0, 1).
        adversary (np.ndarray): nu[s, o], support inside `neighborhood`.
        policy (np.ndarray): pi[o, a].
        neighborhood (np.ndarray | None): Boolean relation allowed for nu.
        positions (np.ndarray | None): 1-D embedding of the states.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    adversary: np.ndarray
    policy: np.ndarray
    neighborhood: np.ndarray | None = None
    positions: np.ndarray | None = None

    def __post_init__(self):
        self.transitions = _check_stochastic("T", self.transitions)
        self.adversary = _check_stochastic("nu", self.adversary)
        self.policy = _check_stochastic("pi", self.policy)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        n, a = self.n_states, self.n_actions
        if self.transitions.shape != (n, a, n) or self.rewards.shape != (n, a):
            raise ContractViolation("T must be (S, A, S) and R must be (S, A)")
        if self.adversary.shape != (n, n) or self.policy.shape != (n, a):
            raise ContractViolation("nu must be (S, S) and pi must be (S, A)")
        if np.any(self.rewards < 0) or np.any(self.rewards > 1):
            raise ContractViolation("Rewards must lie in [0, 1]")
        if not 0 <= self.gamma < 1:
            raise ContractViolation("gamma must lie in [0, 1)")
        if self.neighborhood is not None:
            self.neighborhood = np.asarray(self.neighborhood, dtype=bool)
            if np.any((self.adversary > 0) & ~self.neighborhood):
                raise ContractViolation("nu puts mass outside the neighborhood")
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if np.any(np.diff(self.positions) <= 0):
                raise ContractViolation("Positions must be strictly increasing")

    @property
    def n_states(self):
        return self.rewards.shape[0]

    @property
    def n_actions(self):
        return self.rewards.shape[1]

    def with_adversary(self, adversary):
        return replace(self, adversary=adversary)

    def with_policy(self, policy):
        return replace(self, policy=policy)


@dataclass(frozen=True)
class Bounded:
    """A computed quantity together with its truncation or solver slack."""

    value: float
    slack: float


def _policy(pomdp, policy):
    return pomdp.policy if policy is None else _check_stochastic("pi", policy)


def _chain(pomdp, action_probs):
    """Reward vector and transition matrix under per-state action probabilities."""
    rewards = np.sum(action_probs * pomdp.rewards, axis=1)
    transitions = np.einsum("sa,sat->st", action_probs, pomdp.transitions)
    return rewards, transitions


def _solve(pomdp, rewards, transitions):
    n = pomdp.n_states
    values = np.linalg.solve(np.eye(n) - pomdp.gamma * transitions, rewards)
    for _ in range(10_000):
        updated = rewards + pomdp.gamma * transitions @ values
        residual = np.max(np.abs(updated - values))
        values = updated
        if residual < settings.VALUE_TOLERANCE:
            break
    return values


def mdp_value(pomdp, policy=None):
    """
    V of the unattacked MDP: the policy sees the true state.

    Returns:
        np.ndarray: V[s]; the Bellman residual is below 1e-12.
    """

    rewards, transitions = _chain(pomdp, _policy(pomdp, policy))
    return _solve(pomdp, rewards, transitions)


def observation_marginal(pomdp, b, a):
    """P_o(o' | b, a) = sum_s b(s) sum_s' T(s, a, s') nu(s', o')."""
    return (np.asarray(b) @ pomdp.transitions[:, a, :]) @ pomdp.adversary


def se_update(pomdp, b, o, a):
    """
    Bayesian posterior over the next true state after acting a and observing o.

    Raises:
        ImpossibleObservation: If o has zero probability under (b, a).
    """

    predicted = np.asarray(b, dtype=np.float64) @ pomdp.transitions[:, a, :]
    joint = predicted * pomdp.adversary[:, o]
    total = joint.sum()
    if total <= 0:
        raise ImpossibleObservation(f"Observation {o} impossible after action {a}")
    return joint / total


def initial_belief(pomdp, o, prior=None):
    """Posterior over the true state given a first observation and a prior."""
    prior = np.full(pomdp.n_states, 1.0 / pomdp.n_states) if prior is None else prior
    joint = prior * pomdp.adversary[:, o]
    if joint.sum() <= 0:
        raise ImpossibleObservation(f"Observation {o} impossible under the prior")
    return joint / joint.sum()


@dataclass(frozen=True, eq=False)
class ChainKernels:
    """
    Per-state kernels making U and delta linear in the belief.

    U(b, o) = b @ U_tilde[:, o] and delta(o, b) = b @ D_tilde[:, o].
    """

    u_tilde: np.ndarray
    d_tilde: np.ndarray
    attacked_value: np.ndarray


def chain_kernels(pomdp, policy=None):
    """Solve the attacked true-state chain for the U and delta kernels."""
    pi = _policy(pomdp, policy)
    nu, R, T, gamma = pomdp.adversary, pomdp.rewards, pomdp.transitions, pomdp.gamma
    attacked_probs = nu @ pi
    rewards, transitions = _chain(pomdp, attacked_probs)
    w = _solve(pomdp, rewards, transitions)
    # c(s) = sum_o nu(s, o) sum_a pi(a|o) (R(o, a) - R(s, a))
    observed_reward = np.sum(pi * R, axis=1)
    c = nu @ observed_reward - rewards
    y = _solve(pomdp, c, transitions)
    continuation_u = T @ w
    continuation_d = T @ y
    # [s, o] = sum_a pi(a|o) (.)
    u_tilde = (R + gamma * continuation_u) @ pi.T
    d_tilde = observed_reward[None, :] - R @ pi.T + gamma * continuation_d @ pi.T
    return ChainKernels(u_tilde=u_tilde, d_tilde=d_tilde, attacked_value=w)


def expand_tree(pomdp, b, o, horizon, policy=None, node_cap=settings.TREE_NODE_CAP):
    """
    Explicit observation-tree expansion of U and delta to depth `horizon`.

    Returns:
        tuple: (U_H, delta_H).

    Raises:
        TreeTooLarge: When more than `node_cap` nodes would be visited.
    """

    pi = _policy(pomdp, policy)
    R, gamma = pomdp.rewards, pomdp.gamma
    visited = [0]

    def expand(belief, observation, depth):
        visited[0] += 1
        if visited[0] > node_cap:
            raise TreeTooLarge(
                f"Tree expansion exceeded {node_cap} nodes; use a smaller horizon "
                f"or fewer states"
            )
        if depth == 0:
            return 0.0, 0.0
        u = d = 0.0
        for a in np.flatnonzero(pi[observation] > 0):
            expected = float(belief @ R[:, a])
            u_a, d_a = expected, R[observation, a] - expected
            joint = (belief @ pomdp.transitions[:, a, :])[:, None] * pomdp.adversary
            marginal = joint.sum(axis=0)
            for nxt in np.flatnonzero(marginal > 0):
                cu, cd = expand(joint[:, nxt] / marginal[nxt], nxt, depth - 1)
                u_a += gamma * marginal[nxt] * cu
                d_a += gamma * marginal[nxt] * cd
            u += pi[observation, a] * u_a
            d += pi[observation, a] * d_a
        return u, d

    return expand(np.asarray(b, dtype=np.float64), int(o), horizon)


def truncation_slack(gamma, horizon):
    return gamma**horizon / (1.0 - gamma)


def belief_value(pomdp, b, o, horizon=None, policy=None, kernels=None):
    """
    U(b) of the attacked POMDP, the current observation being o.

    With `horizon=None` the value is exact up to solver tolerance; otherwise the
    observation tree is expanded and the slack is gamma^H / (1 - gamma).
    """

    if horizon is None:
        kernels = kernels or chain_kernels(pomdp, policy)
        value = float(np.asarray(b) @ kernels.u_tilde[:, o])
        return Bounded(value, settings.SOLVER_SLACK)
    u, _ = expand_tree(pomdp, b, o, horizon, policy)
    return Bounded(u, truncation_slack(pomdp.gamma, horizon))


def delta_exact(pomdp, s_o, b, horizon=None, policy=None, kernels=None):
    """C-ACoE delta(s_o, b); tree slack is 2 gamma^H / (1 - gamma)."""
    if horizon is None:
        kernels = kernels or chain_kernels(pomdp, policy)
        value = float(np.asarray(b) @ kernels.d_tilde[:, s_o])
        return Bounded(value, settings.SOLVER_SLACK)
    _, d = expand_tree(pomdp, b, s_o, horizon, policy)
    return Bounded(d, 2.0 * truncation_slack(pomdp.gamma, horizon))


def tv_distance(p, q):
    """Total variation distance 0.5 * ||p - q||_1."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractViolation(f"Shape mismatch {p.shape} vs {q.shape}")
    return float(min(max(0.5 * np.abs(p - q).sum(), 0.0), 1.0))


def w1_distance_1d(p, q, positions):
    """1-Wasserstein distance of two distributions on sorted 1-D positions."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if p.shape != q.shape or p.shape != positions.shape:
        raise ContractViolation("p, q and positions must share one shape")
    if np.any(np.diff(positions) <= 0):
        raise ContractViolation("Positions must be strictly increasing")
    cdf_gap = np.abs(np.cumsum(p) - np.cumsum(q))[:-1]
    return float(np.sum(cdf_gap * np.diff(positions)))


def reachable_pairs(pomdp, depth=2, policy=None, max_pairs=5000):
    """
    Observation/belief pairs reachable within `depth` steps.

    Roots are all first observations under a uniform prior; children follow
    every action with positive probability and every possible observation.
    """

    pi = _policy(pomdp, policy)
    queue = deque()
    for o in range(pomdp.n_states):
        if pomdp.adversary[:, o].sum() > 0:
            queue.append((o, initial_belief(pomdp, o), 0))
    pairs = []
    while queue and len(pairs) < max_pairs:
        o, b, level = queue.popleft()
        pairs.append((o, b))
        if level == depth:
            continue
        for a in np.flatnonzero(pi[o] > 0):
            marginal = observation_marginal(pomdp, b, a)
            for nxt in np.flatnonzero(marginal > 0):
                queue.append((nxt, se_update(pomdp, b, nxt, a), level + 1))
    return pairs


def support_vertex_tv(pomdp):
    """
    Maximum of TV(T(.|o, a), P_o(.|e_s, a)) over o, a and s with nu(s, o) > 0.

    Every reachable belief paired with o is supported on {s : nu(s, o) > 0} and TV
    is convex in the belief, so this bounds TV over all reachable pairs.
    """

    best = 0.0
    for o in range(pomdp.n_states):
        for s in np.flatnonzero(pomdp.adversary[:, o] > 0):
            for a in range(pomdp.n_actions):
                predicted = pomdp.transitions[s, a] @ pomdp.adversary
                best = max(best, tv_distance(pomdp.transitions[o, a], predicted))
    return best


@dataclass
class TheoremReport:
    """
    Outcome of one bound check.

    Attributes:
        name (str): "theorem1" or "theorem2".
        bound (float): Right-hand side including slack.
        max_lhs (float): Largest |V - U - delta| found.
        constants (dict): K, Xi, L, xi, eps as applicable.
        records (list[dict]): Per-pair lhs, bound and margin.
        violations (list[dict]): Pairs whose lhs exceeds the bound.
    """

    name: str
    bound: float
    max_lhs: float
    constants: dict
    records: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.violations

    @property
    def margin(self):
        return self.bound - self.max_lhs

    def raise_for_violations(self):
        if self.violations:
            logger.error(f"{self.name}: {len(self.violations)} violations")
            raise VerificationFailure(
                f"{self.name} bound violated on {len(self.violations)} pairs",
                {"constants": self.constants, "violations": self.violations},
            )
        return self

    def to_dict(self):
        return {
            "name": self.name,
            "bound": self.bound,
            "max_lhs": self.max_lhs,
            "margin": self.margin,
            "constants": self.constants,
            "records": self.records,
            "violations": self.violations,
        }


def _gap_records(pomdp, pairs, policy, bound):
    values = mdp_value(pomdp, policy)
    kernels = chain_kernels(pomdp, policy)
    records, violations = [], []
    for o, b in pairs:
        u = b @ kernels.u_tilde[:, o]
        d = b @ kernels.d_tilde[:, o]
        lhs = float(abs(values[o] - u - d))
        record = {
            "o": int(o),
            "belief": b.tolist(),
            "lhs": lhs,
            "bound": bound,
            "margin": bound - lhs,
        }
        records.append(record)
        if lhs > bound:
            violations.append(record)
    return values, records, violations


def pair_tv(pomdp, pairs):
    """Maximum of TV(T(.|o, a), P_o(.|b, a)) over the enumerated pairs."""
    return max(
        (
            tv_distance(pomdp.transitions[o, a], observation_marginal(pomdp, b, a))
            for o, b in pairs
            for a in range(pomdp.n_actions)
        ),
        default=0.0,
    )


def verify_theorem1(pomdp, policy=None, depth=2, max_pairs=5000):
    """
    Check |V(s_o) - U(b) - delta(s_o, b)| <= gamma K Xi / (1 - gamma) + slack.

    Xi is the TV maximum over the enumerated reachable pairs. The looser bound
    from the support-vertex maximum is reported in `constants` only; violations
    record whether they would also break it.
    """

    policy = _policy(pomdp, policy)
    values = mdp_value(pomdp, policy)
    pairs = reachable_pairs(pomdp, depth, policy, max_pairs)
    k = float(values.max())
    gamma = pomdp.gamma
    slack = 2 * settings.SOLVER_SLACK
    xi = pair_tv(pomdp, pairs)
    xi_vertex = support_vertex_tv(pomdp)
    bound = gamma * k * xi / (1.0 - gamma) + slack
    vertex_bound = gamma * k * xi_vertex / (1.0 - gamma) + slack
    _, records, violations = _gap_records(pomdp, pairs, policy, bound)
    for record in violations:
        record["within_vertex_bound"] = record["lhs"] <= vertex_bound
    if violations:
        logger.warning(
            f"Uncertainty bound {bound:.6g} broken on {len(violations)} pairs"
        )
    constants = {
        "K": k,
        "Xi": xi,
        "Xi_vertex": xi_vertex,
        "vertex_bound": vertex_bound,
        "gamma": gamma,
    }
    max_lhs = max(record["lhs"] for record in records)
    return TheoremReport("theorem1", bound, max_lhs, constants, records, violations)


def neighborhood_within(positions, eps):
    positions = np.asarray(positions, dtype=np.float64)
    return np.abs(positions[:, None] - positions[None, :]) <= eps + NEIGHBOR_ATOL


def lipschitz_constant(values, positions):
    """max |V(s) - V(s')| / |x_s - x_s'| over all pairs."""
    gaps = np.abs(values[:, None] - values[None, :])
    distance = np.abs(positions[:, None] - positions[None, :])
    off = distance > 0
    return float(np.max(gaps[off] / distance[off])) if np.any(off) else 0.0


def transition_w1_bound(pomdp, eps):
    """xi = max over eps-close state pairs and actions of W1(T(.|s,a), T(.|s',a))."""
    positions = pomdp.positions
    close = neighborhood_within(positions, eps)
    best = 0.0
    for s, s2 in zip(*np.nonzero(close)):
        for a in range(pomdp.n_actions):
            w1 = w1_distance_1d(
                pomdp.transitions[s, a], pomdp.transitions[s2, a], positions
            )
            best = max(best, w1)
    return best


def verify_theorem2(pomdp, eps, policy=None, depth=2, max_pairs=5000):
    """
    Check |V - U - delta| <= gamma L (xi + eps) / (1 - gamma) + slack on a line.

    Raises:
        ContractViolation: If the states have no positions or nu moves mass
            further than eps.
    """

    if pomdp.positions is None:
        raise ContractViolation("The drift bound needs states embedded on a line")
    if np.any((pomdp.adversary > 0) & ~neighborhood_within(pomdp.positions, eps)):
        raise ContractViolation("nu moves observations further than eps")
    policy = _policy(pomdp, policy)
    values = mdp_value(pomdp, policy)
    lipschitz = lipschitz_constant(values, pomdp.positions)
    xi = transition_w1_bound(pomdp, eps)
    gamma = pomdp.gamma
    bound = gamma * lipschitz * (xi + eps) / (1.0 - gamma) + 2 * settings.SOLVER_SLACK
    pairs = reachable_pairs(pomdp, depth, policy, max_pairs)
    _, records, violations = _gap_records(pomdp, pairs, policy, bound)
    constants = {"L": lipschitz, "xi": xi, "eps": eps, "gamma": gamma}
    max_lhs = max(record["lhs"] for record in records)
    return TheoremReport("theorem2", bound, max_lhs, constants, records, violations)


def index_neighborhood(n_states, radius=1):
    index = np.arange(n_states)
    return np.abs(index[:, None] - index[None, :]) <= radius


def random_adversary(rng, neighborhood):
    nu = np.zeros(neighborhood.shape)
    for s in range(neighborhood.shape[0]):
        support = np.flatnonzero(neighborhood[s])
        nu[s, support] = rng.dirichlet(np.ones(support.size))
    return nu


def random_pomdp(rng, n_states=5, n_actions=3, gamma=0.9):
    """
    Random instance: Dirichlet(1) transition and policy rows, uniform rewards and
    a Dirichlet adversary over index-distance-1 neighbors.
    """

    neighborhood = index_neighborhood(n_states)
    return FinitePOMDP(
        transitions=rng.dirichlet(np.ones(n_states), size=(n_states, n_actions)),
        rewards=rng.uniform(0.0, 1.0, size=(n_states, n_actions)),
        gamma=gamma,
        adversary=random_adversary(rng, neighborhood),
        policy=rng.dirichlet(np.ones(n_actions), size=n_states),
        neighborhood=neighborhood,
        positions=np.linspace(0.0, 1.0, n_states),
    )


def random_walk_pomdp(rng, n_states=6, n_actions=2, gamma=0.9):
    """Smooth chain on a line: each action moves left, stays or moves right."""
    positions = np.linspace(0.0, 1.0, n_states)
    neighborhood = index_neighborhood(n_states)
    transitions = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            weights = rng.dirichlet(np.ones(3))
            for step, weight in zip((-1, 0, 1), weights):
                transitions[s, a, min(max(s + step, 0), n_states - 1)] += weight
    slope = rng.uniform(-1.0, 1.0, size=n_actions)
    rewards = np.clip(0.5 + 0.5 * slope[None, :] * (positions[:, None] - 0.5), 0, 1)
    return FinitePOMDP(
        transitions=transitions,
        rewards=rewards,
        gamma=gamma,
        adversary=random_adversary(rng, neighborhood),
        policy=rng.dirichlet(np.ones(n_actions), size=n_states),
        neighborhood=neighborhood,
        positions=positions,
    )


def drift_pomdp(n_states=8, gamma=0.9):
    """
    Deterministic rightward drift with R(s) = x_s and a half-self adversary.

    Transition supports of neighbors are disjoint yet one spacing apart, which
    makes TV coarse and W1 tight.
    """

    positions = np.linspace(0.0, 1.0, n_states)
    transitions = np.zeros((n_states, 1, n_states))
    for s in range(n_states):
        transitions[s, 0, min(s + 1, n_states - 1)] = 1.0
    neighborhood = index_neighborhood(n_states)
    adversary = np.zeros((n_states, n_states))
    for s in range(n_states):
        others = [t for t in (s - 1, s + 1) if 0 <= t < n_states]
        adversary[s, s] = 0.5
        adversary[s, others] = 0.5 / len(others)
    return FinitePOMDP(
        transitions=transitions,
        rewards=positions.reshape(-1, 1).copy(),
        gamma=gamma,
        adversary=adversary,
        policy=np.ones((n_states, 1)),
        neighborhood=neighborhood,
        positions=positions,
    )


def self_weight_adversary(neighborhood, weight):
    """nu(s, s) = weight, the rest spread evenly over the other neighbors."""
    n = neighborhood.shape[0]
    nu = np.zeros((n, n))
    for s in range(n):
        others = [t for t in np.flatnonzero(neighborhood[s]) if t != s]
        if not others:
            nu[s, s] = 1.0
            continue
        nu[s, s] = weight
        nu[s, others] = (1.0 - weight) / len(others)
    return nu


def stress_theorem1(pomdp, weights=np.linspace(0.0, 1.0, 11), depth=2):
    """Grid-search the adversary's self weight for the largest gap, then verify."""
    reports = []
    for weight in weights:
        candidate = pomdp.with_adversary(
            self_weight_adversary(pomdp.neighborhood, weight)
        )
        reports.append(verify_theorem1(candidate, depth=depth))
    worst = max(reports, key=lambda report: report.max_lhs)
    logger.debug(f"Uncertainty bound stress: worst gap {worst.max_lhs:.6f}")
    return worst


def grid_pomdp(env, self_weight=0.5, policy=None):
    """
    FinitePOMDP of a TabularGridEnv whose adversary reports an adjacent cell.

    Terminal cells are absorbing with zero reward; the default policy is uniform.
    """

    model = env.tabular_model()
    cells = np.array([env.cell_of(index) for index in range(env.n_states)])
    manhattan = np.abs(cells[:, None, :] - cells[None, :, :]).sum(axis=-1)
    neighborhood = manhattan <= 1
    n, a = model.rewards.shape
    return FinitePOMDP(
        transitions=model.transitions,
        rewards=model.rewards,
        gamma=model.gamma,
        adversary=self_weight_adversary(neighborhood, self_weight),
        policy=np.full((n, a), 1.0 / a) if policy is None else policy,
        neighborhood=neighborhood,
    )


@dataclass(frozen=True, eq=False)
class ObservationProxy:
    """
    Observation-indexed model for the minimum C-ACoE.

    Attributes:
        costs (np.ndarray): Immediate error c[o, a].
        kernel (np.ndarray): P(o' | o, a).
        gamma (float): Discount.
    """

    costs: np.ndarray
    kernel: np.ndarray
    gamma: float

    def __post_init__(self):
        _check_stochastic("P(o'|o,a)", self.kernel)


def build_observation_proxy(pomdp, prior=None):
    """
    Proxy with b_o proportional to prior * nu(., o) for every observation.

    c[o, a] = R(o, a) - sum_s b_o(s) R(s, a) and
    P(o' | o, a) = sum_s b_o(s) sum_s' T(s, a, s') nu(s', o').
    """

    n = pomdp.n_states
    costs = np.zeros((n, pomdp.n_actions))
    kernel = np.zeros((n, pomdp.n_actions, n))
    for o in range(n):
        try:
            b = initial_belief(pomdp, o, prior)
        except ImpossibleObservation:
            b = np.eye(n)[o]
        costs[o] = pomdp.rewards[o] - b @ pomdp.rewards
        for a in range(pomdp.n_actions):
            kernel[o, a] = observation_marginal(pomdp, b, a)
    return ObservationProxy(costs, kernel, pomdp.gamma)


def delta_star(proxy, tolerance=settings.DELTA_STAR_TOLERANCE, max_iterations=100_000):
    """
    Minimum C-ACoE per observation by value iteration with a min over actions.

    Returns:
        np.ndarray: delta*[o], Bellman residual below `tolerance`.
    """

    values = np.zeros(proxy.costs.shape[0])
    for _ in range(max_iterations):
        updated = np.min(proxy.costs + proxy.gamma * proxy.kernel @ values, axis=1)
        residual = np.max(np.abs(updated - values))
        values = updated
        if residual < tolerance * (1.0 - proxy.gamma):
            break
    return values


def policy_delta(proxy, actions):
    """C-ACoE of a deterministic stationary policy on the proxy."""
    rows = np.arange(proxy.costs.shape[0])
    costs = proxy.costs[rows, actions]
    kernel = proxy.kernel[rows, actions]
    return np.linalg.solve(np.eye(rows.size) - proxy.gamma * kernel, costs)


def delta_star_brute_force(proxy):
    """Elementwise minimum over all |A|^|O| deterministic stationary policies."""
    n_obs, n_actions = proxy.costs.shape
    best = np.full(n_obs, np.inf)
    for actions in itertools.product(range(n_actions), repeat=n_obs):
        best = np.minimum(best, policy_delta(proxy, np.array(actions)))
    return best


def verify_proposition1(proxy):
    """Compare value iteration against brute-force policy enumeration."""
    iterated = delta_star(proxy)
    enumerated = delta_star_brute_force(proxy)
    gap = float(np.max(np.abs(iterated - enumerated)))
    residual = float(
        np.max(
            np.abs(
                np.min(proxy.costs + proxy.gamma * proxy.kernel @ iterated, axis=1)
                - iterated
            )
        )
    )
    report = {
        "delta_star": iterated.tolist(),
        "enumerated": enumerated.tolist(),
        "max_gap": gap,
        "residual": residual,
        "passed": gap <= settings.DELTA_STAR_TOLERANCE,
    }
    if not report["passed"]:
        raise VerificationFailure("delta* differs from policy enumeration", report)
    return report


@dataclass(frozen=True)
class LemmaCase:
    """Analytic log-weight z and reward R on the box [-eps, eps]^dim."""

    name: str
    dim: int
    z: object
    reward: object


LEMMA_CASES = (
    LemmaCase(
        "linear-z-sine-reward",
        1,
        lambda s, eps: 1.5 * s[..., 0] / eps,
        lambda s, eps: 0.5 + 0.4 * np.sin(np.pi * s[..., 0] / eps),
    ),
    LemmaCase(
        "quadratic-z-ramp-reward",
        1,
        lambda s, eps: 2.0 * (s[..., 0] / eps) ** 2,
        lambda s, eps: 0.5 * (s[..., 0] / eps + 1.0),
    ),
    LemmaCase(
        "planar-z-planar-reward",
        2,
        lambda s, eps: (s[..., 0] + s[..., 1]) / eps,
        lambda s, eps: 0.5 + 0.25 * (s[..., 0] + s[..., 1]) / eps,
    ),
)


def quadrature(case, eps, points=2001):
    """Midpoint-grid box averages of e^z and R e^z; returns (mean e^z, R)."""
    edges = np.linspace(-eps, eps, points + 1)
    axis = 0.5 * (edges[1:] + edges[:-1])
    grid = np.stack(np.meshgrid(*([axis] * case.dim), indexing="ij"), axis=-1)
    weights = np.exp(case.z(grid, eps))
    mean_weight = float(weights.mean())
    return mean_weight, float((case.reward(grid, eps) * weights).mean() / mean_weight)


def verify_sampling_lemma(case, n, trials=1000, eps=0.1, rng=None, points=None):
    """
    Monte Carlo check of the self-normalized reward estimator.

    Per trial, n uniform samples give w = e^z, the unbiased estimate mean(w) and
    the ratio estimate R_hat = sum(R w) / sum(w). The band eps_n is the 95%
    quantile of |quadrature mean(e^z) / mean(w) - 1|.

    Returns:
        dict: Report with the band, both estimator checks and pass flags.
    """

    rng = rng if rng is not None else np.random.default_rng(0)
    points = points or (2001 if case.dim == 1 else 401)
    mean_weight, reward = quadrature(case, eps, points)
    samples = rng.uniform(-eps, eps, size=(trials, n, case.dim))
    weights = np.exp(case.z(samples, eps))
    weight_means = weights.mean(axis=1)
    estimates = (case.reward(samples, eps) * weights).sum(axis=1) / weights.sum(axis=1)
    band = float(np.quantile(np.abs(mean_weight / weight_means - 1.0), 0.95))
    weight_se = float(weight_means.std(ddof=1) / np.sqrt(trials))
    estimate_se = float(estimates.std(ddof=1) / np.sqrt(trials))
    estimate_mean = float(estimates.mean())
    weight_ok = abs(weight_means.mean() - mean_weight) <= 3.0 * weight_se + 1e-15
    band_ok = abs(estimate_mean - reward) <= band * abs(reward) + 3.0 * estimate_se
    report = {
        "case": case.name,
        "n": n,
        "trials": trials,
        "quadrature_reward": reward,
        "quadrature_weight": mean_weight,
        "estimate_mean": estimate_mean,
        "estimate_se": estimate_se,
        "band": band,
        "spread": float(estimates.std(ddof=1)),
        "weight_within_3se": bool(weight_ok),
        "estimate_within_3se": bool(abs(estimate_mean - reward) <= 3 * estimate_se),
        "within_band": bool(band_ok),
        "passed": bool(weight_ok and band_ok),
    }
    logger.debug(f"Sampling check {case.name} n={n}: band {band:.4f}")
    return report


def theorem1_suite(instances=100, seed=0, depth=2):
    """Random instances with |S| <= 6, |A| <= 3 and gamma in {0.5, 0.9}."""
    rng = np.random.default_rng(seed)
    reports = []
    for index in range(instances):
        pomdp = random_pomdp(
            rng,
            n_states=int(rng.integers(2, 7)),
            n_actions=int(rng.integers(1, 4)),
            gamma=(0.5, 0.9)[index % 2],
        )
        reports.append(verify_theorem1(pomdp, depth=depth))
    return reports


def theorem2_suite(instances=50, seed=0, depth=2):
    """Random-walk chains plus the drift instance comparing both bounds."""
    rng = np.random.default_rng(seed)
    reports = []
    for index in range(instances):
        pomdp = random_walk_pomdp(
            rng, n_states=int(rng.integers(3, 8)), gamma=(0.5, 0.9)[index % 2]
        )
        eps = float(pomdp.positions[1] - pomdp.positions[0])
        reports.append(verify_theorem2(pomdp, eps, depth=depth))
    drift = drift_pomdp()
    eps = float(drift.positions[1] - drift.positions[0])
    comparison = {
        "theorem1": verify_theorem1(drift, depth=depth),
        "theorem2": verify_theorem2(drift, eps, depth=depth),
    }
    return reports, comparison


def proposition1_suite(instances=20, seed=0):
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(instances):
        pomdp = random_pomdp(
            rng, n_states=int(rng.integers(2, 5)), n_actions=int(rng.integers(1, 4))
        )
        reports.append(verify_proposition1(build_observation_proxy(pomdp)))
    return reports


def lemma_suite(sizes=(10, 100, 1000), trials=1000, seed=0, eps=0.1):
    rng = np.random.default_rng(seed)
    return [
        verify_sampling_lemma(case, n, trials, eps, rng)
        for case in LEMMA_CASES
        for n in sizes
    ]
