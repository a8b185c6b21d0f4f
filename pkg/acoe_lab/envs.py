"""Desk-scale environments with reward queries, snapshots and exact tabular models."""

import copy
from dataclasses import dataclass

import numpy as np
from loguru import logger

from .errors import ContractViolation, SnapshotMismatch

BOUNDS_ATOL = 1e-12
ENV_NAMES = ("nav1d", "nav2d", "nav", "grid", "cliff")


@dataclass(frozen=True, eq=False)
class Bounds:
    """Axis-aligned observation bounds."""

    low: np.ndarray
    high: np.ndarray

    @classmethod
    def box(cls, dim, low=-1.0, high=1.0):
        return cls(np.full(dim, float(low)), np.full(dim, float(high)))

    def contains(self, x):
        x = np.asarray(x, dtype=np.float64)
        return bool(
            np.all(x >= self.low - BOUNDS_ATOL) and np.all(x <= self.high + BOUNDS_ATOL)
        )

    def clip(self, x):
        return np.clip(x, self.low, self.high)


@dataclass(frozen=True, eq=False)
class EnvSnapshot:
    """
    Full serialized environment state.

    Attributes:
        env_type (str): Class name of the environment that produced it.
        signature (tuple): Shape-defining configuration of that environment.
        state (dict): Position or cell, step counter, flags and RNG state.
    """

    env_type: str
    signature: tuple
    state: dict


@dataclass(frozen=True, eq=False)
class TabularModel:
    """
    Exact (S, A, T, R, gamma) arrays of a tabular environment.

    Attributes:
        transitions (np.ndarray): T[s, a, s'], rows sum to 1.
        rewards (np.ndarray): R[s, a] in [0, 1].
        gamma (float): Discount.
        start_probs (np.ndarray): Initial state distribution.
        terminal (np.ndarray): Boolean terminal mask.
        observations (np.ndarray): Observation vector of every state.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    start_probs: np.ndarray
    terminal: np.ndarray
    observations: np.ndarray


class Env:
    """
    Base class for environments that support counterfactual reward queries.

    Subclasses keep every piece of mutable state in `_state_dict` / `_load_state`
    so snapshots capture it completely.
    """

    discrete = True
    n_actions = None
    action_dim = 1
    horizon = 100
    gamma = 0.99

    def __init__(self):
        self._rng = np.random.default_rng(0)
        self._t = 0
        self._done = True
        self.truncated = False

    @property
    def obs_dim(self):
        return self.bounds.low.size

    @property
    def done(self):
        return self._done

    @property
    def signature(self):
        raise NotImplementedError

    def reset(self, seed):
        """Seed the environment stream and return the initial observation."""
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._done = False
        self.truncated = False
        self._reset_state()
        return self.observation()

    def step(self, action):
        """
        Advance one step.

        Returns:
            tuple: (next observation, reward in [0, 1], done flag).

        Raises:
            ContractViolation: If the episode is already over or the action is
                outside the action space.
        """

        if self._done:
            raise ContractViolation("step() called after the episode finished")
        action = self._check_action(action)
        reward, terminal = self._transition(action)
        self._t += 1
        self.truncated = not terminal and self._t >= self.horizon
        self._done = terminal or self.truncated
        return self.observation(), reward, self._done

    def reward_query(self, state, action):
        """
        Reward R(state, action) at a hypothetical state, without mutating the env.

        Raises:
            ContractViolation: If the state lies outside the observation bounds.
        """

        state = np.asarray(state, dtype=np.float64).reshape(-1)
        if state.size != self.obs_dim or not self.bounds.contains(state):
            logger.error(f"Reward query outside observation bounds: {state}")
            raise ContractViolation(f"State {state} is outside the observation bounds")
        return self._reward_at(state, self._check_action(action))

    def snapshot(self):
        state = self._state_dict()
        state.update(
            t=self._t,
            done=self._done,
            truncated=self.truncated,
            rng=copy.deepcopy(self._rng.bit_generator.state),
        )
        return EnvSnapshot(type(self).__name__, self.signature, state)

    def restore(self, snapshot):
        """
        Restore a snapshot taken from an environment of the same type and shape.

        Raises:
            SnapshotMismatch: If the snapshot belongs to a different environment.
        """

        if (
            not isinstance(snapshot, EnvSnapshot)
            or snapshot.env_type != type(self).__name__
            or snapshot.signature != self.signature
        ):
            raise SnapshotMismatch(
                f"Cannot restore {getattr(snapshot, 'env_type', snapshot)!r} "
                f"into {type(self).__name__}"
            )
        state = snapshot.state
        self._load_state(state)
        self._t = state["t"]
        self._done = state["done"]
        self.truncated = state["truncated"]
        self._rng = np.random.default_rng()
        self._rng.bit_generator.state = copy.deepcopy(state["rng"])

    def _check_action(self, action):
        if self.discrete:
            index = int(np.asarray(action).reshape(-1)[0])
            if not 0 <= index < self.n_actions:
                raise ContractViolation(f"Action {action} outside 0..{self.n_actions}")
            return index
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != self.action_dim:
            raise ContractViolation(f"Action must have {self.action_dim} components")
        return action

    def observation(self):
        raise NotImplementedError

    def _reset_state(self):
        raise NotImplementedError

    def _transition(self, action):
        raise NotImplementedError

    def _reward_at(self, state, action):
        raise NotImplementedError

    def _state_dict(self):
        raise NotImplementedError

    def _load_state(self, state):
        raise NotImplementedError


class ContinuousNavEnv(Env):
    """
    Point agent on [-1, 1]^d steering towards a goal.

    The reward at state s is clamp(1 - ||s - goal||_inf, 0, 1), independent of the
    action. Discrete actions move by +-step_size along one axis (index 2i is +e_i,
    2i + 1 is -e_i); continuous actions are velocities clipped to [-1, 1]^d.
    """

    def __init__(
        self,
        dim=2,
        goal=None,
        step_size=0.1,
        horizon=100,
        discrete=True,
        noise=0.0,
        gamma=0.99,
    ):
        super().__init__()
        if dim not in (1, 2):
            raise ContractViolation("Navigation dimension must be 1 or 2")
        self.dim = dim
        self.goal = np.zeros(dim) if goal is None else np.asarray(goal, dtype=float)
        self.step_size = float(step_size)
        self.horizon = int(horizon)
        self.discrete = bool(discrete)
        self.noise = float(noise)
        self.gamma = float(gamma)
        self.n_actions = 2 * dim if self.discrete else None
        self.action_dim = 1 if self.discrete else dim
        self.bounds = Bounds.box(dim)
        self.position = np.zeros(dim)

    @property
    def signature(self):
        return (self.dim, self.discrete, tuple(self.goal.tolist()))

    def observation(self):
        return self.position.copy()

    def reward_at_position(self, position):
        distance = float(np.max(np.abs(position - self.goal)))
        return min(max(1.0 - distance, 0.0), 1.0)

    def _reset_state(self):
        self.position = self._rng.uniform(-1.0, 1.0, size=self.dim)

    def _transition(self, action):
        reward = self.reward_at_position(self.position)
        if self.discrete:
            move = np.zeros(self.dim)
            move[action // 2] = 1.0 if action % 2 == 0 else -1.0
        else:
            move = np.clip(action, -1.0, 1.0)
        position = self.position + self.step_size * move
        if self.noise > 0:
            position = position + self.noise * self._rng.standard_normal(self.dim)
        self.position = self.bounds.clip(position)
        return reward, False

    def _reward_at(self, state, action):
        return self.reward_at_position(state)

    def _state_dict(self):
        return {"position": self.position.copy()}

    def _load_state(self, state):
        self.position = np.array(state["position"], dtype=np.float64)


# up, right, down, left
GRID_MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0))


class TabularGridEnv(Env):
    """
    Grid world with terminal cells, perpendicular slips and an exact model.

    The reward R[s, a] is the expected reward of entering the next cell (terminal
    rewards, plus optional per-cell rewards), so `step` emits exactly R[s, a] and
    the episode ends when a terminal cell is entered.

    Attributes:
        width (int): Grid width.
        height (int): Grid height.
        terminals (dict): (x, y) -> reward collected on entering that cell.
        slip (float): Probability of moving perpendicular to the intended move.
        start_cells (list): Cells the episode may start in, uniformly.
    """

    discrete = True
    n_actions = 4

    def __init__(
        self,
        width=4,
        height=3,
        terminals=None,
        slip=0.0,
        start_cells=None,
        cell_rewards=None,
        horizon=100,
        gamma=0.9,
    ):
        super().__init__()
        self.width = int(width)
        self.height = int(height)
        self.terminals = dict(terminals or {(self.width - 1, self.height - 1): 1.0})
        self.cell_rewards = dict(cell_rewards or {})
        self.slip = float(slip)
        self.start_cells = [tuple(cell) for cell in (start_cells or [(0, 0)])]
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        self.action_dim = 1
        self.bounds = Bounds.box(2)
        rewards = list(self.terminals.values()) + list(self.cell_rewards.values())
        if any(not 0.0 <= r <= 1.0 for r in rewards) or not 0.0 <= self.slip <= 1.0:
            raise ContractViolation("Rewards and slip probability must lie in [0, 1]")
        self._model = self._build_model()
        self.cell = self.start_cells[0]

    @classmethod
    def cliff(cls, width=5, slip=0.0, horizon=50, gamma=0.9):
        """Two-row grid whose bottom row between start and goal is a cliff."""
        terminals = {(x, 0): 0.0 for x in range(1, width - 1)}
        terminals[(width - 1, 0)] = 1.0
        return cls(
            width=width,
            height=2,
            terminals=terminals,
            slip=slip,
            start_cells=[(0, 0)],
            horizon=horizon,
            gamma=gamma,
        )

    @property
    def n_states(self):
        return self.width * self.height

    @property
    def signature(self):
        return (
            self.width,
            self.height,
            self.slip,
            tuple(sorted(self.terminals.items())),
            tuple(sorted(self.cell_rewards.items())),
            tuple(self.start_cells),
        )

    def index(self, cell):
        return cell[1] * self.width + cell[0]

    def cell_of(self, index):
        return (index % self.width, index // self.width)

    def encode(self, cell):
        x, y = cell
        ox = 2.0 * x / (self.width - 1) - 1.0 if self.width > 1 else 0.0
        oy = 2.0 * y / (self.height - 1) - 1.0 if self.height > 1 else 0.0
        return np.array([ox, oy])

    def decode(self, observation):
        """Nearest cell of a (possibly hypothetical) observation vector."""
        ox, oy = np.asarray(observation, dtype=np.float64)
        x = int(round((ox + 1.0) / 2.0 * (self.width - 1))) if self.width > 1 else 0
        y = int(round((oy + 1.0) / 2.0 * (self.height - 1))) if self.height > 1 else 0
        return (min(max(x, 0), self.width - 1), min(max(y, 0), self.height - 1))

    def _move(self, cell, move):
        x, y = cell[0] + move[0], cell[1] + move[1]
        if 0 <= x < self.width and 0 <= y < self.height:
            return (x, y)
        return cell

    def _build_model(self):
        n = self.n_states
        transitions = np.zeros((n, 4, n))
        rewards = np.zeros((n, 4))
        terminal = np.zeros(n, dtype=bool)
        enter_reward = np.zeros(n)
        for index in range(n):
            cell = self.cell_of(index)
            terminal[index] = cell in self.terminals
            enter_reward[index] = self.terminals.get(
                cell, self.cell_rewards.get(cell, 0.0)
            )
        for index in range(n):
            cell = self.cell_of(index)
            for action, move in enumerate(GRID_MOVES):
                if terminal[index]:
                    transitions[index, action, index] = 1.0
                    continue
                sides = (GRID_MOVES[(action + 1) % 4], GRID_MOVES[(action + 3) % 4])
                outcomes = [(move, 1.0 - self.slip)]
                outcomes += [(side, self.slip / 2) for side in sides]
                for outcome, prob in outcomes:
                    target = self.index(self._move(cell, outcome))
                    transitions[index, action, target] += prob
                rewards[index, action] = transitions[index, action] @ enter_reward
        start_probs = np.zeros(n)
        for cell in self.start_cells:
            start_probs[self.index(cell)] += 1.0 / len(self.start_cells)
        observations = np.stack([self.encode(self.cell_of(i)) for i in range(n)])
        return TabularModel(
            transitions=transitions,
            rewards=rewards,
            gamma=self.gamma,
            start_probs=start_probs,
            terminal=terminal,
            observations=observations,
        )

    def tabular_model(self):
        return self._model

    def observation(self):
        return self.encode(self.cell)

    def _reset_state(self):
        choice = self._rng.choice(len(self.start_cells))
        self.cell = self.start_cells[int(choice)]

    def _transition(self, action):
        index = self.index(self.cell)
        reward = float(self._model.rewards[index, action])
        row = self._model.transitions[index, action]
        next_index = int(self._rng.choice(self.n_states, p=row))
        self.cell = self.cell_of(next_index)
        return reward, bool(self._model.terminal[next_index])

    def _reward_at(self, state, action):
        return float(self._model.rewards[self.index(self.decode(state)), action])

    def _state_dict(self):
        return {"cell": tuple(self.cell)}

    def _load_state(self, state):
        self.cell = tuple(state["cell"])


def _cell_key(key):
    if isinstance(key, str):
        return tuple(int(v) for v in key.split(","))
    return tuple(key)


def make_env(spec):
    """
    Build an environment from its configuration section.

    Args:
        spec (dict): {"name": "nav1d" | "nav2d" | "grid" | "cliff", ...kwargs}.

    Returns:
        Env: A fresh, un-reset environment.
    """

    spec = dict(spec)
    name = spec.pop("name", "nav2d")
    if name in ("nav1d", "nav2d"):
        return ContinuousNavEnv(dim=1 if name == "nav1d" else 2, **spec)
    if name == "nav":
        return ContinuousNavEnv(**spec)
    if name == "grid":
        if "terminals" in spec:
            spec["terminals"] = {
                _cell_key(key): reward for key, reward in spec["terminals"].items()
            }
        if "cell_rewards" in spec:
            spec["cell_rewards"] = {
                _cell_key(key): reward for key, reward in spec["cell_rewards"].items()
            }
        if "start_cells" in spec:
            spec["start_cells"] = [tuple(cell) for cell in spec["start_cells"]]
        return TabularGridEnv(**spec)
    if name == "cliff":
        return TabularGridEnv.cliff(**spec)
    raise ContractViolation(f"Unknown environment: {name}")
