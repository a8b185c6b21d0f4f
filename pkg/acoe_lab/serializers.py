"""JSON serializers for networks, optimizers, models, beliefs and agent bundles."""

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from loguru import logger
from rest_framework import serializers
from rest_framework.settings import api_settings

from .agents import PolicyBundle, TrainConfig
from .attacks import ATTACK_KINDS, FLAG_ALIASES, AttackSpec
from .belief import BeliefParticles
from .diffnet import ACTIVATIONS, HEADS, DiffNet, Optimizer, OptimizerConfig
from .dqn import ReplayEntry
from .envs import EnvSnapshot, TabularModel
from .errors import ContractViolation, SerializationError
from .oracle import FinitePOMDP

DIFFNET_FORMAT = "acoe-diffnet/1"
BUNDLE_FORMAT = "acoe-bundle/1"


def write_json(path, data):
    """Write JSON atomically: a temporary file in the same directory is renamed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(handle, "w") as stream:
            json.dump(data, stream, indent=2, allow_nan=False)
        os.replace(temporary, path)
    except (TypeError, ValueError):
        os.unlink(temporary)
        logger.error(f"Refusing to write {path}: not JSON-serializable")
        raise
    return path


def read_json(path):
    try:
        with open(path) as stream:
            return json.load(stream)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Failed to read {path}: {e}")
        raise SerializationError(f"Cannot read {path}: {e}") from e


def _tupled(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tupled(item) for item in value)
    return value


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def flatten_errors(detail, path=""):
    """
    Yield `(path, message)` pairs from nested serializer errors.

    Nested serializers extend the path with `.name`, list items with `[index]`;
    non-field errors stay on the path of their serializer.
    """

    if isinstance(detail, dict):
        for key, value in detail.items():
            if key == api_settings.NON_FIELD_ERRORS_KEY:
                child = path
            elif isinstance(key, int):
                child = f"{path}[{key}]"
            else:
                child = f"{path}.{key}" if path else str(key)
            yield from flatten_errors(value, child)
    elif isinstance(detail, list):
        for index, item in enumerate(detail):
            if isinstance(item, dict):
                yield from flatten_errors(item, f"{path}[{index}]")
            else:
                yield from flatten_errors(item, path)
    else:
        yield path, str(detail)


def describe_errors(errors):
    return "; ".join(
        f"{path}: {message}" if path else message
        for path, message in flatten_errors(errors)
    )


def deserialize(serializer_class, document, **kwargs):
    """
    Validate `document` with `serializer_class` and build the domain object.

    Keyword arguments are passed to `save()`.

    Raises:
        SerializationError: If the document or the object it describes is invalid.
    """

    serializer = serializer_class(data=document)
    if not serializer.is_valid():
        message = describe_errors(serializer.errors)
        logger.error(f"{serializer_class.__name__} rejected input: {message}")
        raise SerializationError(message)
    try:
        return serializer.save(**kwargs)
    except ContractViolation as e:
        logger.error(f"{serializer_class.__name__} rejected input: {e}")
        raise SerializationError(str(e)) from e


class ArrayField(serializers.Field):
    """
    Numpy array stored as nested JSON lists.

    Attributes:
        ndim (int | None): Required number of dimensions, any when None.
        dtype (type): Element type of the parsed array.
    """

    default_error_messages = {
        "invalid": "Expected a rectangular array of numbers.",
        "ndim": "Expected {ndim} dimensions, got {actual}.",
        "non_finite": "Array entries must be finite.",
    }

    def __init__(self, ndim=None, dtype=np.float64, **kwargs):
        self.ndim = ndim
        self.dtype = dtype
        super().__init__(**kwargs)

    def to_representation(self, value):
        return np.asarray(value).tolist()

    def to_internal_value(self, data):
        if isinstance(data, (str, dict)):
            self.fail("invalid")
        try:
            array = np.asarray(data, dtype=self.dtype)
        except (TypeError, ValueError):
            self.fail("invalid")
        if self.ndim is not None and array.ndim != self.ndim:
            self.fail("ndim", ndim=self.ndim, actual=array.ndim)
        if array.dtype.kind == "f" and not np.all(np.isfinite(array)):
            self.fail("non_finite")
        return array


class PlainDataField(serializers.JSONField):
    """Free-form JSON whose numpy contents are converted on output."""

    def to_representation(self, value):
        return _jsonable(value)


class StrictSerializer(serializers.Serializer):
    """Serializer that rejects keys it does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError(
                    {key: ["Unknown field."] for key in unknown}
                )
        return super().to_internal_value(data)


class DiffNetSerializer(StrictSerializer):
    """Network checkpoint in the `acoe-diffnet/1` schema."""

    format = serializers.CharField(default=DIFFNET_FORMAT)
    sizes = serializers.ListField(
        child=serializers.IntegerField(min_value=1), min_length=2
    )
    activations = serializers.ListField(child=serializers.ChoiceField(ACTIVATIONS))
    head = serializers.ChoiceField(HEADS)
    weights = serializers.ListField(child=ArrayField(ndim=2))
    biases = serializers.ListField(child=ArrayField(ndim=1))
    log_std = ArrayField(ndim=1, allow_null=True)

    def validate_format(self, value):
        if value != DIFFNET_FORMAT:
            raise serializers.ValidationError(f"Unsupported network format {value!r}")
        return value

    def validate(self, data):
        try:
            self.create(data)
        except ContractViolation as e:
            raise serializers.ValidationError(str(e))
        return data

    def create(self, validated_data):
        data = dict(validated_data)
        data.pop("format", None)
        return DiffNet(**data)


class OptimizerSerializer(StrictSerializer):
    """Optimizer settings plus its step count and moment estimates."""

    method = serializers.ChoiceField(("sgd", "adam"), source="config.method")
    lr = serializers.FloatField(min_value=0.0, source="config.lr")
    anneal = serializers.ChoiceField(("none", "linear"), source="config.anneal")
    total_steps = serializers.IntegerField(min_value=0, source="config.total_steps")
    beta1 = serializers.FloatField(source="config.beta1", required=False)
    beta2 = serializers.FloatField(source="config.beta2", required=False)
    eps = serializers.FloatField(source="config.eps", required=False)
    max_grad_norm = serializers.FloatField(
        source="config.max_grad_norm", allow_null=True, required=False
    )
    t = serializers.IntegerField(min_value=0)
    m = serializers.ListField(child=ArrayField())
    v = serializers.ListField(child=ArrayField())

    def validate(self, data):
        try:
            data["config"] = OptimizerConfig(**data["config"])
        except ContractViolation as e:
            raise serializers.ValidationError(str(e))
        return data

    def create(self, validated_data):
        """Needs `net=` passed to `save()` for the parameter shapes."""
        net = validated_data.get("net")
        if net is None:
            raise SerializationError("Restoring an optimizer needs its network")
        optimizer = Optimizer(validated_data["config"], net)
        return optimizer.load_state(
            validated_data["t"], validated_data["m"], validated_data["v"]
        )


class TabularModelSerializer(StrictSerializer):
    transitions = ArrayField(ndim=3)
    rewards = ArrayField(ndim=2)
    gamma = serializers.FloatField(min_value=0.0, max_value=1.0)
    start_probs = ArrayField(ndim=1)
    terminal = ArrayField(ndim=1, dtype=bool)
    observations = ArrayField(ndim=2, required=False)

    def validate(self, data):
        n = data["rewards"].shape[0]
        if data["transitions"].shape[::2] != (n, n):
            raise serializers.ValidationError(
                "Transition array does not match the rewards"
            )
        if data["start_probs"].shape != (n,) or data["terminal"].shape != (n,):
            raise serializers.ValidationError("Expected one start and terminal entry")
        data.setdefault("observations", np.zeros((n, 0)))
        return data

    def create(self, validated_data):
        return TabularModel(**validated_data)


class PomdpSerializer(StrictSerializer):
    """FinitePOMDP instances as saved and loaded by `verify`."""

    transitions = ArrayField(ndim=3)
    rewards = ArrayField(ndim=2)
    gamma = serializers.FloatField()
    adversary = ArrayField(ndim=2)
    policy = ArrayField(ndim=2)
    neighborhood = ArrayField(ndim=2, dtype=bool, allow_null=True, required=False)
    positions = ArrayField(ndim=1, allow_null=True, required=False)

    def validate(self, data):
        try:
            FinitePOMDP(**data)
        except ContractViolation as e:
            raise serializers.ValidationError(f"Invalid POMDP document: {e}")
        return data

    def create(self, validated_data):
        return FinitePOMDP(**validated_data)


class BeliefSerializer(StrictSerializer):
    """Particle beliefs, as written to debug dumps."""

    source = serializers.ChoiceField(("a2b", "a3b", "point-mass"))
    states = ArrayField(ndim=2)
    weights = ArrayField(ndim=1)
    scores = ArrayField(ndim=1, allow_null=True, required=False)

    def validate(self, data):
        try:
            self.create(data)
        except ContractViolation as e:
            raise serializers.ValidationError(str(e))
        return data

    def create(self, validated_data):
        return BeliefParticles(**validated_data)


class AttackSpecSerializer(StrictSerializer):
    """
    Attack specifications given as JSON objects.

    Keys accept the same aliases as attack flags (`k`, `N`, `budget`); omitted
    keys take the AttackSpec defaults.
    """

    kind = serializers.ChoiceField(ATTACK_KINDS)
    eps = serializers.FloatField(min_value=0.0, required=False)
    steps = serializers.IntegerField(min_value=1, required=False)
    alpha = serializers.FloatField(allow_null=True, required=False)
    loss = serializers.ChoiceField(("nll",), required=False)
    threshold = serializers.FloatField(required=False)
    budget_fraction = serializers.FloatField(
        min_value=0.0, max_value=1.0, required=False
    )
    base = serializers.ChoiceField(("fgsm", "pgd", "mad"), required=False)
    depth = serializers.IntegerField(min_value=0, required=False)
    branches = serializers.IntegerField(min_value=1, required=False)
    directions = serializers.IntegerField(min_value=1, required=False)
    random_start = serializers.BooleanField(required=False)

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = {FLAG_ALIASES.get(key, key): value for key, value in data.items()}
        return super().to_internal_value(data)

    def validate(self, data):
        try:
            self.create(data)
        except ContractViolation as e:
            raise serializers.ValidationError(str(e))
        return data

    def create(self, validated_data):
        return AttackSpec(**validated_data)


class EnvSnapshotSerializer(StrictSerializer):
    env_type = serializers.CharField()
    signature = PlainDataField()
    state = PlainDataField()

    def validate_state(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError("Expected an object.")
        return value

    def create(self, validated_data):
        return EnvSnapshot(
            env_type=validated_data["env_type"],
            signature=_tupled(validated_data["signature"]),
            state=dict(validated_data["state"]),
        )


class ReplayEntrySerializer(StrictSerializer):
    observation = ArrayField(ndim=1)
    action = serializers.IntegerField(min_value=0)
    reward = serializers.FloatField()
    next_observation = ArrayField(ndim=1)
    delta_r = serializers.FloatField(min_value=-1.0, max_value=1.0)
    done = serializers.BooleanField()

    def create(self, validated_data):
        return ReplayEntry(**validated_data)


class TrainConfigField(serializers.Field):
    """TrainConfig snapshot stored with a bundle."""

    default_error_messages = {"invalid": "Invalid training configuration: {error}"}

    def to_representation(self, value):
        return value.to_dict()

    def to_internal_value(self, data):
        if not isinstance(data, dict):
            self.fail("invalid", error="expected an object")
        try:
            return TrainConfig.from_dict(data)
        except (TypeError, ValueError) as e:
            self.fail("invalid", error=e)


class BundleSerializer(StrictSerializer):
    """
    Trained agent: its TrainConfig snapshot plus every network.

    On disk a bundle is a directory holding `bundle.json` (format and config) and
    one `<network>.json` per network.
    """

    NETWORKS = ("policy", "value", "delta", "q", "q_target", "delta_target")

    format = serializers.CharField(default=BUNDLE_FORMAT)
    config = TrainConfigField()
    networks = serializers.DictField(child=DiffNetSerializer())

    def validate_format(self, value):
        if value != BUNDLE_FORMAT:
            raise serializers.ValidationError(f"Unsupported bundle format {value!r}")
        return value

    def validate_networks(self, value):
        unknown = sorted(set(value) - set(self.NETWORKS))
        if unknown:
            raise serializers.ValidationError(f"Unknown networks {unknown}")
        return value

    def create(self, validated_data):
        networks = {
            name: DiffNetSerializer().create(document)
            for name, document in validated_data["networks"].items()
        }
        return PolicyBundle(config=validated_data["config"], **networks)


def save_bundle(bundle, directory):
    directory = Path(directory)
    document = BundleSerializer(bundle).data
    for name, network in document["networks"].items():
        write_json(directory / f"{name}.json", network)
    write_json(
        directory / "bundle.json",
        {
            "format": document["format"],
            "config": document["config"],
            "networks": sorted(document["networks"]),
        },
    )
    logger.info(f"Saved {bundle.algo} bundle to {directory}")
    return directory


def load_bundle(directory):
    """
    Load a bundle directory written by `save_bundle`.

    Raises:
        SerializationError: If any file is missing or malformed.
    """

    directory = Path(directory)
    header = read_json(directory / "bundle.json")
    if not isinstance(header, dict) or not isinstance(header.get("networks"), list):
        raise SerializationError(f"{directory} is not a bundle directory")
    document = dict(header)
    document["networks"] = {
        name: read_json(directory / f"{name}.json") for name in header["networks"]
    }
    return deserialize(BundleSerializer, document)
