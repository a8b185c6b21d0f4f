"""Differentiable multilayer networks, action distributions, losses and optimizers."""

import math
from dataclasses import dataclass

import numpy as np
from loguru import logger

from . import settings
from .errors import ContractViolation, DistributionMismatch, NonFiniteError

ACTIVATIONS = ("tanh", "relu")
HEADS = ("linear", "categorical", "gaussian")
LOG_2PI = math.log(2.0 * math.pi)


def softmax(logits):
    """Row-wise softmax, stable under adding a constant to every logit."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    """Row-wise log-softmax."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    """
    Action distribution produced by a policy head.

    Attributes:
        kind (str): "categorical" or "gaussian".
        probs (np.ndarray | None): Probability vector (categorical).
        mean (np.ndarray | None): Mean vector (gaussian).
        std (np.ndarray | None): Per-dimension standard deviation (gaussian).
    """

    kind: str
    probs: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "categorical":
            probs = np.asarray(self.probs, dtype=np.float64)
            if probs.ndim != 1 or probs.size == 0:
                raise ContractViolation("Categorical probabilities must be a vector")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > settings.PROBABILITY_ATOL:
                raise ContractViolation(
                    f"Categorical probabilities must be nonnegative and sum to 1, "
                    f"got sum {probs.sum()}"
                )
            object.__setattr__(self, "probs", probs)
        elif self.kind == "gaussian":
            mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
            std = np.broadcast_to(
                np.asarray(self.std, dtype=np.float64), mean.shape
            ).copy()
            if np.any(std <= 0) or not np.all(np.isfinite(std)):
                raise ContractViolation("Gaussian standard deviations must be > 0")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", std)
        else:
            raise ContractViolation(f"Unknown distribution kind: {self.kind}")

    @classmethod
    def categorical(cls, probs):
        return cls(kind="categorical", probs=probs)

    @classmethod
    def gaussian(cls, mean, std):
        return cls(kind="gaussian", mean=mean, std=std)

    @property
    def dim(self):
        return self.probs.size if self.kind == "categorical" else self.mean.size

    def log_prob(self, action):
        """Log-density (gaussian) or log-probability (categorical) of an action."""
        if self.kind == "categorical":
            p = self.probs[int(action)]
            return math.log(max(p, settings.CATEGORICAL_LOG_FLOOR))
        z = (np.asarray(action, dtype=np.float64) - self.mean) / self.std
        return float(
            -0.5 * np.sum(z * z) - np.sum(np.log(self.std)) - 0.5 * self.dim * LOG_2PI
        )

    def sample(self, rng):
        if self.kind == "categorical":
            return int(rng.choice(self.dim, p=self.probs))
        return self.mean + self.std * rng.standard_normal(self.dim)

    def mode(self):
        """Greedy action: argmax (lowest index on ties) or the mean."""
        if self.kind == "categorical":
            return int(np.argmax(self.probs))
        return self.mean.copy()

    def preference_gap(self):
        """Spread between the most and least preferred action."""
        if self.kind == "categorical":
            return float(self.probs.max() - self.probs.min())
        return float(self.mean.max() - self.mean.min())


def kl_divergence(p, q):
    """
    Kullback-Leibler divergence KL(p || q) between two action distributions.

    Categorical entries of q are floored at 1e-12 before the logarithm; terms where
    p is zero contribute nothing.

    Raises:
        DistributionMismatch: If kinds or dimensions differ.
    """

    if p.kind != q.kind or p.dim != q.dim:
        raise DistributionMismatch(
            f"Cannot compare {p.kind}[{p.dim}] with {q.kind}[{q.dim}]"
        )
    if p.kind == "categorical":
        support = p.probs > 0
        log_q = np.log(np.maximum(q.probs[support], settings.CATEGORICAL_LOG_FLOOR))
        value = float(np.sum(p.probs[support] * (np.log(p.probs[support]) - log_q)))
    else:
        var_p = p.std**2
        var_q = q.std**2
        value = float(
            np.sum(
                np.log(q.std / p.std)
                + (var_p + (p.mean - q.mean) ** 2) / (2.0 * var_q)
                - 0.5
            )
        )
    return max(value, 0.0)


class Loss:
    """
    Scalar loss over a batch of raw network outputs.

    Subclasses implement `evaluate(output, head, log_std)` returning the loss value,
    its gradient w.r.t. the outputs and, for gaussian heads, w.r.t. log_std.
    """

    name = "loss"

    def evaluate(self, output, head, log_std):
        raise NotImplementedError


def _action_log_probs(output, head, log_std, actions):
    """Log-probabilities of actions and the pieces needed to differentiate them."""
    if head == "gaussian":
        std = np.exp(log_std)
        actions = np.asarray(actions, dtype=np.float64).reshape(output.shape)
        z = (actions - output) / std
        log_probs = (
            -0.5 * np.sum(z * z, axis=1)
            - np.sum(log_std)
            - 0.5 * output.shape[1] * LOG_2PI
        )
        return log_probs, {"z": z, "std": std}
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    log_p = log_softmax(output)
    rows = np.arange(output.shape[0])
    onehot = np.zeros_like(output)
    onehot[rows, actions] = 1.0
    return log_p[rows, actions], {"onehot": onehot, "probs": np.exp(log_p)}


def _chain_log_probs(head, pieces, weight):
    """Gradients of sum_i weight_i * log pi(a_i|x_i) w.r.t. outputs and log_std."""
    if head == "gaussian":
        z, std = pieces["z"], pieces["std"]
        d_out = weight[:, None] * z / std
        d_log_std = np.sum(weight[:, None] * (z * z - 1.0), axis=0)
        return d_out, d_log_std
    d_out = weight[:, None] * (pieces["onehot"] - pieces["probs"])
    return d_out, None


class SquaredError(Loss):
    """
    Squared error against a target, averaged over the batch.

    With `actions`, only the output column of each row's action is regressed
    (Q-style heads).
    """

    name = "squared-error"

    def __init__(self, target, actions=None):
        self.target = np.asarray(target, dtype=np.float64)
        self.actions = None if actions is None else np.asarray(actions, dtype=np.int64)

    def evaluate(self, output, head, log_std):
        batch = output.shape[0]
        d_out = np.zeros_like(output)
        if self.actions is not None:
            rows = np.arange(batch)
            diff = output[rows, self.actions.reshape(-1)] - self.target.reshape(-1)
            d_out[rows, self.actions.reshape(-1)] = 2.0 * diff / batch
            return float(np.mean(diff**2)), d_out, None
        diff = output - self.target.reshape(output.shape)
        return float(np.sum(diff**2) / batch), 2.0 * diff / batch, None


class NegLogProb(Loss):
    """Negative log-probability of given actions, averaged over the batch."""

    name = "neg-log-prob"

    def __init__(self, actions):
        self.actions = actions

    def evaluate(self, output, head, log_std):
        batch = output.shape[0]
        log_probs, pieces = _action_log_probs(output, head, log_std, self.actions)
        d_out, d_log_std = _chain_log_probs(head, pieces, np.full(batch, -1.0 / batch))
        return float(-np.mean(log_probs)), d_out, d_log_std


class ClippedSurrogate(Loss):
    """Negated PPO clipped surrogate objective."""

    name = "clipped-surrogate"

    def __init__(self, actions, old_log_probs, advantages, clip):
        self.actions = actions
        self.old_log_probs = np.asarray(old_log_probs, dtype=np.float64).reshape(-1)
        self.advantages = np.asarray(advantages, dtype=np.float64).reshape(-1)
        self.clip = clip

    def evaluate(self, output, head, log_std):
        batch = output.shape[0]
        log_probs, pieces = _action_log_probs(output, head, log_std, self.actions)
        ratio = np.exp(log_probs - self.old_log_probs)
        unclipped = ratio * self.advantages
        clipped = np.clip(ratio, 1.0 - self.clip, 1.0 + self.clip) * self.advantages
        objective = np.minimum(unclipped, clipped)
        d_log_probs = np.where(unclipped <= clipped, ratio * self.advantages, 0.0)
        d_out, d_log_std = _chain_log_probs(head, pieces, -d_log_probs / batch)
        return float(-np.mean(objective)), d_out, d_log_std


class KLToFixed(Loss):
    """
    Mean KL(reference || pi(x)) where the reference distributions are held fixed.

    `reference` is a list of ActionDistribution, one per batch row (or a single one
    broadcast to every row).
    """

    name = "kl-to-fixed"

    def __init__(self, reference):
        self.reference = (
            reference if isinstance(reference, (list, tuple)) else [reference]
        )

    def _rows(self, batch, attribute):
        rows = [getattr(dist, attribute) for dist in self.reference]
        if len(rows) == 1:
            rows = rows * batch
        return np.stack(rows)

    def evaluate(self, output, head, log_std):
        batch = output.shape[0]
        if head == "gaussian":
            mean_p = self._rows(batch, "mean")
            var_p = self._rows(batch, "std") ** 2
            std_q = np.exp(log_std)
            var_q = std_q**2
            spread = var_p + (mean_p - output) ** 2
            value = np.sum(
                log_std - 0.5 * np.log(var_p) + spread / (2.0 * var_q) - 0.5, axis=1
            )
            d_out = (output - mean_p) / var_q / batch
            d_log_std = np.sum(1.0 - spread / var_q, axis=0) / batch
            return float(np.mean(value)), d_out, d_log_std
        probs_p = self._rows(batch, "probs")
        log_q = log_softmax(output)
        safe_log_p = np.log(np.where(probs_p > 0, probs_p, 1.0))
        value = np.sum(np.where(probs_p > 0, probs_p * (safe_log_p - log_q), 0.0), 1)
        d_out = (np.exp(log_q) - probs_p) / batch
        return float(np.mean(value)), d_out, None


class OutputSum(Loss):
    """Sum of every output entry; its gradient is the network's column sums."""

    name = "output-sum"

    def evaluate(self, output, head, log_std):
        return float(np.sum(output)), np.ones_like(output), None


@dataclass(eq=False)
class DiffNet:
    """
    Fully connected network with tanh or relu hidden layers.

    Attributes:
        sizes (list[int]): Layer widths, input first and output last.
        weights (list[np.ndarray]): Per-layer matrices of shape (out, in).
        biases (list[np.ndarray]): Per-layer bias vectors.
        activations (list[str]): Activation tag per hidden layer.
        head (str): "linear", "categorical" (logits) or "gaussian" (mean).
        log_std (np.ndarray | None): State-independent log standard deviation of a
            gaussian head.
    """

    sizes: list
    weights: list
    biases: list
    activations: list
    head: str = "linear"
    log_std: np.ndarray | None = None

    def __post_init__(self):
        self.sizes = [int(size) for size in self.sizes]
        if len(self.sizes) < 2 or any(size <= 0 for size in self.sizes):
            raise ContractViolation(f"Invalid layer sizes: {self.sizes}")
        layers = len(self.sizes) - 1
        if len(self.weights) != layers or len(self.biases) != layers:
            raise ContractViolation("One weight matrix and bias per layer required")
        if len(self.activations) != layers - 1:
            raise ContractViolation("One activation tag per hidden layer required")
        if any(tag not in ACTIVATIONS for tag in self.activations):
            raise ContractViolation(f"Unknown activation in {self.activations}")
        if self.head not in HEADS:
            raise ContractViolation(f"Unknown head: {self.head}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.sizes[index + 1], self.sizes[index])
            if w.shape != expected or b.shape != (expected[0],):
                raise ContractViolation(
                    f"Layer {index} has shape {w.shape}/{b.shape}, expected {expected}"
                )
        if self.head == "gaussian":
            if self.log_std is None:
                self.log_std = np.full(
                    self.sizes[-1], math.log(settings.GAUSSIAN_INIT_STD)
                )
            self.log_std = np.array(self.log_std, dtype=np.float64).reshape(-1)
        else:
            self.log_std = None
        if not all(np.all(np.isfinite(p)) for p in self.parameters()):
            raise ContractViolation("Network parameters must be finite")

    @classmethod
    def build(
        cls,
        sizes,
        rng,
        activation="tanh",
        head="linear",
        output_scale=1.0,
        init_std=None,
    ):
        """
        Create a network with Glorot-uniform weights and zero biases.

        Args:
            sizes (list[int]): Layer widths, input first.
            rng (np.random.Generator): Initialization stream.
            activation (str): Activation for every hidden layer.
            head (str): Output head tag.
            output_scale (float): Multiplier on the last layer's initial weights.
            init_std (float | None): Initial gaussian standard deviation.

        Returns:
            DiffNet: The new network.
        """

        weights, biases = [], []
        for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            if index == len(sizes) - 2:
                w = w * output_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        log_std = None
        if head == "gaussian":
            std = settings.GAUSSIAN_INIT_STD if init_std is None else init_std
            log_std = np.full(sizes[-1], math.log(std))
        return cls(
            sizes=list(sizes),
            weights=weights,
            biases=biases,
            activations=[activation] * (len(sizes) - 2),
            head=head,
            log_std=log_std,
        )

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    @property
    def is_gaussian(self):
        return self.head == "gaussian"

    def parameters(self):
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..., [log_std]."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        if self.log_std is not None:
            params.append(self.log_std)
        return params

    def clone(self):
        return DiffNet(
            sizes=list(self.sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activations=list(self.activations),
            head=self.head,
            log_std=None if self.log_std is None else self.log_std.copy(),
        )

    def load_from(self, other):
        """Copy another network's parameters into this one, in place."""
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine[...] = theirs

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x.reshape(1, -1) if single else x
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ContractViolation(
                f"Input of shape {x.shape} does not match input size {self.input_dim}"
            )
        return batch, single

    def _trace(self, batch):
        activations = [batch]
        pre_activations = []
        last = len(self.weights) - 1
        for index, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = activations[-1] @ w.T + b
            pre_activations.append(pre)
            if index < last:
                if self.activations[index] == "tanh":
                    activations.append(np.tanh(pre))
                else:
                    activations.append(np.maximum(pre, 0.0))
        return pre_activations, activations

    def _backward(self, pre_activations, activations, d_out):
        layers = len(self.weights)
        grad_w = [None] * layers
        grad_b = [None] * layers
        delta = d_out
        for index in range(layers - 1, -1, -1):
            if index < layers - 1:
                if self.activations[index] == "tanh":
                    delta = delta * (1.0 - activations[index + 1] ** 2)
                else:
                    delta = delta * (pre_activations[index] > 0.0)
            grad_w[index] = delta.T @ activations[index]
            grad_b[index] = delta.sum(axis=0)
            delta = delta @ self.weights[index]
        return grad_w, grad_b, delta

    def forward(self, x):
        """
        Evaluate the raw outputs (logits, mean or values).

        Raises:
            ContractViolation: If the input width does not match the first layer.
        """

        batch, single = self._as_batch(x)
        output = self._trace(batch)[0][-1]
        return output[0] if single else output

    __call__ = forward

    def distribution(self, x):
        """Action distribution at a single input."""
        return self.distributions(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]

    def distributions(self, batch):
        """Action distributions for every row of a batch of inputs."""
        output = np.atleast_2d(self.forward(batch))
        if self.is_gaussian:
            std = np.exp(self.log_std)
            return [ActionDistribution.gaussian(row, std) for row in output]
        return [ActionDistribution.categorical(row) for row in softmax(output)]

    def log_probs(self, batch, actions):
        """Log-probabilities of a batch of actions, computed from the raw outputs."""
        output = np.atleast_2d(self.forward(batch))
        return _action_log_probs(output, self.head, self.log_std, actions)[0]

    def input_vjp(self, x, d_out):
        """Vector-Jacobian product of the raw outputs with respect to the inputs."""
        batch, single = self._as_batch(x)
        pre_activations, activations = self._trace(batch)
        d_out = np.asarray(d_out, dtype=np.float64).reshape(pre_activations[-1].shape)
        d_input = self._backward(pre_activations, activations, d_out)[2]
        return d_input[0] if single else d_input

    def _evaluate_loss(self, batch, loss, step):
        pre_activations, activations = self._trace(batch)
        value, d_out, d_log_std = loss.evaluate(
            pre_activations[-1], self.head, self.log_std
        )
        if not math.isfinite(value):
            logger.error(f"Loss {loss.name} evaluated to {value}")
            raise NonFiniteError(loss.name, value, step)
        return value, d_out, d_log_std, pre_activations, activations

    def value_and_param_gradient(self, x, loss, step=None):
        batch, _ = self._as_batch(x)
        value, d_out, d_log_std, pre, acts = self._evaluate_loss(batch, loss, step)
        grad_w, grad_b, _ = self._backward(pre, acts, d_out)
        grads = []
        for gw, gb in zip(grad_w, grad_b):
            grads.extend([gw, gb])
        if self.log_std is not None:
            if d_log_std is None:
                d_log_std = np.zeros_like(self.log_std)
            grads.append(d_log_std)
        return value, grads

    def value_and_input_gradient(self, x, loss, step=None):
        batch, single = self._as_batch(x)
        value, d_out, _, pre, acts = self._evaluate_loss(batch, loss, step)
        d_input = self._backward(pre, acts, d_out)[2]
        return value, (d_input[0] if single else d_input)

    def loss_value(self, x, loss):
        batch, _ = self._as_batch(x)
        output = self._trace(batch)[0][-1]
        return loss.evaluate(output, self.head, self.log_std)[0]


def forward(net, x):
    """Evaluate a network at an input; see DiffNet.forward."""
    return net.forward(x)


def param_gradient(net, x, loss, step=None):
    """Gradient of a scalar loss w.r.t. every parameter, in `parameters()` order."""
    return net.value_and_param_gradient(x, loss, step)[1]


def input_gradient(net, x, loss, step=None):
    """Gradient of a scalar loss w.r.t. the input."""
    return net.value_and_input_gradient(x, loss, step)[1]


@dataclass
class OptimizerConfig:
    """
    Optimizer settings.

    Attributes:
        method (str): "sgd" (plain gradient step) or "adam" (adaptive moments).
        lr (float): Base learning rate.
        anneal (str): "none" or "linear" decay to zero over `total_steps`.
        total_steps (int): Length of the anneal schedule.
        beta1 (float): First-moment decay.
        beta2 (float): Second-moment decay.
        eps (float): Denominator offset.
        max_grad_norm (float | None): Global gradient-norm clip.
    """

    method: str = "adam"
    lr: float = settings.LEARNING_RATE
    anneal: str = "none"
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ContractViolation(f"Unknown optimizer method: {self.method}")
        if self.anneal not in ("none", "linear"):
            raise ContractViolation(f"Unknown anneal schedule: {self.anneal}")
        if self.lr <= 0:
            raise ContractViolation("Learning rate must be positive")


class Optimizer:
    """
    Stateful optimizer for one network.

    Attributes:
        config (OptimizerConfig): Settings.
        t (int): Number of accepted steps.
        m (list[np.ndarray]): First moments (adam).
        v (list[np.ndarray]): Second moments (adam).
    """

    def __init__(self, config, net):
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.parameters()]
        self.v = [np.zeros_like(p) for p in net.parameters()]

    def load_state(self, t, m, v):
        """Restore the step count and moment estimates saved by a checkpoint."""
        shapes = [moment.shape for moment in self.m]
        m = [np.array(moment, dtype=np.float64) for moment in m]
        v = [np.array(moment, dtype=np.float64) for moment in v]
        if [a.shape for a in m] != shapes or [a.shape for a in v] != shapes:
            raise ContractViolation("Optimizer state does not match the network")
        self.t, self.m, self.v = int(t), m, v
        return self

    def learning_rate(self):
        config = self.config
        if config.anneal == "linear" and config.total_steps > 0:
            return config.lr * max(0.0, 1.0 - self.t / config.total_steps)
        return config.lr

    def step(self, net, grads, step=None):
        """
        Apply one update in place.

        Raises:
            NonFiniteError: If any gradient entry is NaN or infinite; nothing is
                updated in that case.
        """

        params = net.parameters()
        if len(grads) != len(params):
            raise ContractViolation("Gradient does not match the parameter list")
        for g in grads:
            if not np.all(np.isfinite(g)):
                logger.error("Rejected optimizer step with non-finite gradient")
                raise NonFiniteError("gradient", float(np.nanmax(np.abs(g))), step)
        if self.config.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.config.max_grad_norm:
                grads = [g * (self.config.max_grad_norm / norm) for g in grads]
        lr = self.learning_rate()
        self.t += 1
        if self.config.method == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return net
        b1, b2 = self.config.beta1, self.config.beta2
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1**self.t)
            v_hat = v / (1.0 - b2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.config.eps)
        return net


def optimizer_step(net, gradient, optimizer, step=None):
    """Update a network in place with one optimizer step and return it."""
    return optimizer.step(net, gradient, step)


class ScoreDifferencePolicy:
    """
    Policy executed by a delta-DQN agent: softmax over Q(s, .) - lam * delta(s, .).

    Input gradients compose the vector-Jacobian products of both heads.
    """

    head = "linear"
    log_std = None
    is_gaussian = False

    def __init__(self, q_net, delta_net, lam):
        shape = (q_net.input_dim, q_net.output_dim)
        if shape != (delta_net.input_dim, delta_net.output_dim):
            raise ContractViolation("Q and delta networks must share input and output")
        self.q_net = q_net
        self.delta_net = delta_net
        self.lam = float(lam)

    @property
    def input_dim(self):
        return self.q_net.input_dim

    @property
    def output_dim(self):
        return self.q_net.output_dim

    def forward(self, x):
        return self.q_net.forward(x) - self.lam * self.delta_net.forward(x)

    __call__ = forward

    def distribution(self, x):
        return self.distributions(np.asarray(x, dtype=np.float64).reshape(1, -1))[0]

    def distributions(self, batch):
        output = np.atleast_2d(self.forward(batch))
        return [ActionDistribution.categorical(row) for row in softmax(output)]

    def loss_value(self, x, loss):
        output = np.atleast_2d(self.forward(x))
        return loss.evaluate(output, self.head, None)[0]

    def value_and_input_gradient(self, x, loss, step=None):
        output = np.atleast_2d(self.forward(x))
        value, d_out, _ = loss.evaluate(output, self.head, None)
        if not math.isfinite(value):
            logger.error(f"Loss {loss.name} evaluated to {value}")
            raise NonFiniteError(loss.name, value, step)
        single = np.asarray(x).ndim == 1
        d_out = d_out[0] if single else d_out
        d_q = self.q_net.input_vjp(x, d_out)
        d_delta = self.delta_net.input_vjp(x, d_out)
        return value, d_q - self.lam * d_delta
