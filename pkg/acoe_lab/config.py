"""Run configuration: one JSON document parsed into frozen dataclasses."""

import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from loguru import logger
from rest_framework import serializers

from . import settings
from .agents import ALGORITHMS, TrainConfig
from .attacks import AttackSpec
from .belief import BELIEF_KINDS
from .diffnet import OptimizerConfig
from .envs import ENV_NAMES, make_env
from .errors import ConfigError, ContractViolation
from .serializers import AttackSpecSerializer, StrictSerializer, flatten_errors

DEFAULT_EVAL_ATTACKS = (
    "identity",
    f"mad:eps={settings.MAD_EVAL_EPS},k={settings.MAD_EVAL_STEPS}",
    f"pgd:eps={settings.PGD_EVAL_EPS},k={settings.PGD_EVAL_STEPS}",
)


def config_hash(raw):
    """SHA-256 of the raw configuration bytes."""
    if isinstance(raw, str):
        raw = raw.encode()
    return hashlib.sha256(raw).hexdigest()


@dataclass(frozen=True)
class EnvConfig:
    """
    Environment section.

    Attributes:
        name (str): "nav1d", "nav2d", "nav", "grid" or "cliff".
        options (dict): Constructor keyword arguments.
    """

    name: str = "nav2d"
    options: dict = field(default_factory=dict)

    def build(self):
        return make_env({"name": self.name, **self.options})

    def to_dict(self):
        return {"name": self.name, **self.options}


@dataclass(frozen=True)
class BeliefConfig:
    """
    Belief section.

    Attributes:
        kind (str): "none", "a2b" or "a3b".
        n (int): Sampled neighborhood size.
        eps (float): Neighborhood radius.
        surrogate_steps (int): PGD iterations of the A3B surrogate.
        cache (bool): Memoize surrogate attacks.
    """

    kind: str = "a3b"
    n: int = settings.NEIGHBORHOOD_SIZE
    eps: float = settings.TRAIN_ATTACK_EPS
    surrogate_steps: int = settings.A3B_SURROGATE_STEPS
    cache: bool = False

    def __post_init__(self):
        if self.kind not in BELIEF_KINDS:
            raise ContractViolation(f"Unknown belief kind: {self.kind}")
        if self.n < 1 or self.eps < 0 or self.surrogate_steps < 1:
            raise ContractViolation("Belief needs n >= 1, eps >= 0, steps >= 1")


@dataclass(frozen=True)
class RunConfig:
    """
    Fully resolved experiment configuration.

    Attributes:
        env (EnvConfig): Environment to train and evaluate on.
        train (TrainConfig): Training template; the seed is set per run.
        belief (BeliefConfig): Belief settings, already folded into `train`.
        attack_train (AttackSpec): Adversary active during training.
        attacks_eval (tuple[AttackSpec]): Attacks of the evaluation table.
        seeds (tuple[int]): Training seeds, one agent each.
        eval_seeds (tuple[int]): Evaluation seeds per agent.
        episodes (int): Evaluation episodes per seed.
        eval_workers (int): Parallel evaluation episodes.
        checkpoint_every (int): Iterations between resumable checkpoints.
        learned_iterations (int): PPO iterations of a learned adversary.
        raw (str): Configuration text as read.
        digest (str): SHA-256 of `raw`.
    """

    env: EnvConfig
    train: TrainConfig
    belief: BeliefConfig
    attack_train: AttackSpec
    attacks_eval: tuple
    seeds: tuple
    eval_seeds: tuple
    episodes: int = 50
    eval_workers: int = 1
    checkpoint_every: int = 1
    learned_iterations: int = 5
    raw: str = ""
    digest: str = ""

    def train_config(self, seed):
        return replace(self.train, seed=int(seed))

    def with_overrides(self, overrides):
        """
        Copy with sweep overrides applied.

        Keys: "lam" (robustness weight), "n" (belief neighborhood), "eps" (belief
        radius) and any TrainConfig field.
        """

        train, belief = self.train, self.belief
        for key, value in overrides.items():
            if key == "n":
                belief = replace(belief, n=int(value))
                train = replace(train, neighborhood=int(value))
            elif key == "eps":
                belief = replace(belief, eps=float(value))
                train = replace(train, train_eps=float(value))
            elif key in {f.name for f in fields(TrainConfig)}:
                train = replace(train, **{key: value})
            else:
                raise ConfigError(f"Unknown sweep parameter {key!r}", field=key)
        return replace(self, train=train, belief=belief)

    def to_dict(self):
        return {
            "env": self.env.to_dict(),
            "train": self.train.to_dict(),
            "attack_train": self.attack_train.to_dict(),
            "attacks_eval": [spec.to_dict() for spec in self.attacks_eval],
            "seeds": list(self.seeds),
            "eval": {
                "episodes": self.episodes,
                "seeds": list(self.eval_seeds),
                "workers": self.eval_workers,
            },
        }


class SeedsField(serializers.ListField):
    """Nonempty list of integer seeds; a single integer is accepted too."""

    def __init__(self, **kwargs):
        super().__init__(child=serializers.IntegerField(), min_length=1, **kwargs)

    def to_internal_value(self, data):
        if isinstance(data, int) and not isinstance(data, bool):
            data = [data]
        return tuple(super().to_internal_value(data))


class AttackField(serializers.Field):
    """Attack given as a flag string such as `pgd:eps=0.1,k=10` or as an object."""

    default_error_messages = {
        "invalid": "{error}",
        "type": "Expected an attack flag string or object.",
    }

    def to_representation(self, value):
        return value.to_dict()

    def to_internal_value(self, data):
        if isinstance(data, str):
            try:
                return AttackSpec.parse(data)
            except ContractViolation as e:
                self.fail("invalid", error=e)
        if not isinstance(data, dict):
            self.fail("type")
        serializer = AttackSpecSerializer(data=data)
        if not serializer.is_valid():
            raise serializers.ValidationError(serializer.errors)
        return serializer.save()


class EnvSectionSerializer(serializers.Serializer):
    """Environment name; every other key is a constructor option."""

    name = serializers.ChoiceField(ENV_NAMES, default="nav2d")

    def to_internal_value(self, data):
        attrs = super().to_internal_value(data)
        attrs["options"] = {key: value for key, value in data.items() if key != "name"}
        return attrs

    def validate(self, data):
        try:
            make_env({"name": data["name"], **data["options"]})
        except (ContractViolation, TypeError, ValueError) as e:
            raise serializers.ValidationError(str(e))
        return data


class AlgoSectionSerializer(StrictSerializer):
    """Algorithm name plus the TrainConfig fields it may override."""

    name = serializers.ChoiceField(ALGORITHMS)
    lam = serializers.FloatField(min_value=0.0, required=False)
    gamma = serializers.FloatField(required=False)
    gae_lambda = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    clip = serializers.FloatField(required=False)
    epochs = serializers.IntegerField(min_value=1, required=False)
    minibatch = serializers.IntegerField(min_value=1, required=False)
    replay_capacity = serializers.IntegerField(min_value=1, required=False)
    target_sync = serializers.IntegerField(min_value=1, required=False)
    learning_starts = serializers.IntegerField(min_value=0, required=False)
    explore_start = serializers.FloatField(
        min_value=0.0, max_value=1.0, required=False
    )
    explore_end = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    explore_steps = serializers.IntegerField(min_value=0, required=False)
    q_target = serializers.ChoiceField(("max", "min"), required=False)
    hidden_sizes = serializers.ListField(
        child=serializers.IntegerField(min_value=1), required=False
    )
    normalize_advantages = serializers.BooleanField(required=False)
    delta_bootstrap = serializers.ChoiceField(("delta", "zero"), required=False)

    def to_internal_value(self, data):
        if isinstance(data, str):
            data = {"name": data}
        return super().to_internal_value(data)


class BeliefSectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(BELIEF_KINDS, required=False)
    n = serializers.IntegerField(min_value=1, required=False)
    eps = serializers.FloatField(min_value=0.0, required=False)
    surrogate_steps = serializers.IntegerField(min_value=1, required=False)
    cache = serializers.BooleanField(required=False)


class OptimSectionSerializer(StrictSerializer):
    method = serializers.ChoiceField(("sgd", "adam"), required=False)
    lr = serializers.FloatField(required=False)
    anneal = serializers.ChoiceField(("none", "linear"), required=False)
    total_steps = serializers.IntegerField(min_value=0, required=False)
    beta1 = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    beta2 = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    eps = serializers.FloatField(min_value=0.0, required=False)
    max_grad_norm = serializers.FloatField(
        min_value=0.0, allow_null=True, required=False
    )

    def validate(self, data):
        try:
            OptimizerConfig(**data)
        except ContractViolation as e:
            raise serializers.ValidationError(str(e))
        return data


class TrainSectionSerializer(StrictSerializer):
    iterations = serializers.IntegerField(min_value=0, required=False)
    steps_per_iteration = serializers.IntegerField(min_value=1, required=False)
    workers = serializers.IntegerField(min_value=1, required=False)
    checkpoint_every = serializers.IntegerField(min_value=1, required=False)


class EvalSectionSerializer(StrictSerializer):
    episodes = serializers.IntegerField(min_value=1, required=False)
    seeds = SeedsField(required=False)
    workers = serializers.IntegerField(min_value=1, required=False)
    learned_iterations = serializers.IntegerField(min_value=1, required=False)


class RunConfigSerializer(StrictSerializer):
    """
    Whole configuration document.

    Only `algo` is required; a section given as null takes its defaults.
    """

    env = EnvSectionSerializer(required=False, allow_null=True)
    algo = AlgoSectionSerializer()
    belief = BeliefSectionSerializer(required=False, allow_null=True)
    attack_train = AttackField(required=False, allow_null=True)
    attacks_eval = serializers.ListField(
        child=AttackField(), min_length=1, required=False, allow_null=True
    )
    optim = OptimSectionSerializer(required=False, allow_null=True)
    seeds = SeedsField(required=False, allow_null=True)
    train = TrainSectionSerializer(required=False, allow_null=True)
    eval = EvalSectionSerializer(required=False, allow_null=True)

    def validate_attack_train(self, value):
        if value is not None and value.kind == "learned":
            raise serializers.ValidationError(
                "A learned adversary cannot drive training"
            )
        return value


def _sections(document):
    """Validated sections with null or omitted ones dropped."""
    serializer = RunConfigSerializer(data=document)
    if not serializer.is_valid():
        problems = list(flatten_errors(serializer.errors))
        for path, message in problems:
            logger.error(f"Configuration field {path or '<document>'}: {message}")
        path, message = problems[0]
        raise ConfigError(message, field=path or None)
    return {
        key: value
        for key, value in serializer.validated_data.items()
        if value is not None
    }


def parse_config(document, raw=""):
    """
    Validate a decoded configuration document and resolve defaults.

    Args:
        document (dict): Decoded JSON.
        raw (str): Original text, hashed into the manifest.

    Returns:
        RunConfig: The resolved configuration.

    Raises:
        ConfigError: Naming the offending field path.
    """

    sections = _sections(document)
    env_section = sections.get("env", {"name": "nav2d", "options": {}})
    env = EnvConfig(name=env_section["name"], options=env_section["options"])

    algo = dict(sections["algo"])
    algo_name = algo.pop("name")
    attack_train = sections.get("attack_train", AttackSpec())
    radius = attack_train.eps or settings.TRAIN_ATTACK_EPS
    try:
        belief = BeliefConfig(**{"eps": radius, **sections.get("belief", {})})
    except ContractViolation as e:
        raise ConfigError(str(e), field="belief") from e
    optim = OptimizerConfig(**sections.get("optim", {}))

    train_section = dict(sections.get("train", {}))
    checkpoint_every = train_section.pop("checkpoint_every", 1)
    try:
        train = TrainConfig(
            algo=algo_name,
            optim=optim,
            belief=belief.kind,
            neighborhood=belief.n,
            train_eps=belief.eps,
            surrogate_steps=belief.surrogate_steps,
            belief_cache=belief.cache,
            **algo,
            **train_section,
        )
    except ContractViolation as e:
        raise ConfigError(str(e), field="algo") from e

    default_attacks = tuple(AttackSpec.parse(flag) for flag in DEFAULT_EVAL_ATTACKS)
    seeds = sections.get("seeds", (0,))
    eval_section = sections.get("eval", {})
    return RunConfig(
        env=env,
        train=train,
        belief=belief,
        attack_train=attack_train,
        attacks_eval=tuple(sections.get("attacks_eval", default_attacks)),
        seeds=seeds,
        eval_seeds=eval_section.get("seeds", seeds),
        episodes=eval_section.get("episodes", 50),
        eval_workers=eval_section.get("workers", 1),
        checkpoint_every=checkpoint_every,
        learned_iterations=eval_section.get("learned_iterations", 5),
        raw=raw,
        digest=config_hash(raw),
    )


def loads_config(text):
    """
    Parse configuration text.

    Raises:
        ConfigError: With line and column on JSON syntax errors.
    """

    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        logger.error(f"Malformed configuration: {e.msg}")
        raise ConfigError(e.msg, line=e.lineno, column=e.colno) from e
    return parse_config(document, raw=text)


def load_config(path):
    try:
        with open(path, "rb") as stream:
            raw = stream.read()
    except OSError as e:
        logger.error(f"Cannot read configuration {path}: {e}")
        raise ConfigError(f"Cannot read {path}: {e.strerror}") from e
    config = loads_config(raw.decode())
    logger.debug(f"Loaded configuration {path} ({config.digest[:12]})")
    return config
