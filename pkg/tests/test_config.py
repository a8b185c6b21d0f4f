"""Test cases for run configuration parsing."""

import json

import pytest

from acoe_lab.config import (
    DEFAULT_EVAL_ATTACKS,
    config_hash,
    load_config,
    loads_config,
    parse_config,
)
from acoe_lab.errors import ConfigError


def test_full_config(config_text):
    """Test case for resolving every section of a valid configuration."""
    text = config_text()
    config = loads_config(text)
    assert config.env.name == "nav2d" and config.env.options == {"horizon": 10}
    assert config.train.algo == "delta-ppo" and config.train.lam == 0.2
    assert config.train.hidden_sizes == (8,)
    assert config.train.belief == "a3b" and config.train.neighborhood == 3
    assert config.train.train_eps == 0.1
    assert config.train.optim.lr == 0.005
    assert config.attack_train.kind == "identity"
    assert [spec.label for spec in config.attacks_eval] == ["identity", "pgd:eps=0.1"]
    assert config.seeds == (0,) and config.eval_seeds == (0,)
    assert config.episodes == 2
    assert config.digest == config_hash(text)


def test_defaults():
    """Test case for the defaults of omitted sections."""
    config = parse_config({"algo": "ppo"})
    assert config.env.name == "nav2d"
    assert config.seeds == (0,)
    assert config.episodes == 50
    assert [spec.label for spec in config.attacks_eval] == [
        "identity",
        "mad:eps=0.15",
        "pgd:eps=0.1",
    ]
    assert len(DEFAULT_EVAL_ATTACKS) == 3
    assert config.train.effective_lambda == 0.0


def test_training_attack_sets_belief_radius():
    """Test case for the belief radius following the training attack budget."""
    config = parse_config({"algo": "delta-dqn", "attack_train": "pgd:eps=0.05,k=3"})
    assert config.belief.eps == 0.05 and config.train.train_eps == 0.05
    explicit = parse_config(
        {"algo": "delta-dqn", "attack_train": "pgd:eps=0.05", "belief": {"eps": 0.2}}
    )
    assert explicit.train.train_eps == 0.2


def test_missing_algo():
    """Test case for the required algorithm field."""
    with pytest.raises(ConfigError) as error:
        parse_config({"env": {"name": "nav2d"}})
    assert error.value.field == "algo"


@pytest.mark.parametrize(
    "document, field",
    [
        ({"algo": "ppo", "colour": 1}, "colour"),
        ({"algo": {"name": "ppo", "speed": 1}}, "algo.speed"),
        ({"algo": "a2c"}, "algo.name"),
        ({"algo": "ppo", "belief": {"kind": "oracle"}}, "belief.kind"),
        ({"algo": "ppo", "belief": {"n": 0}}, "belief.n"),
        ({"algo": "ppo", "attack_train": "learned:eps=0.1"}, "attack_train"),
        ({"algo": "ppo", "attacks_eval": ["pgd:eps=x"]}, "attacks_eval[0]"),
        ({"algo": "ppo", "attacks_eval": []}, "attacks_eval"),
        ({"algo": "ppo", "seeds": []}, "seeds"),
        ({"algo": "ppo", "eval": {"episodes": 0}}, "eval.episodes"),
        ({"algo": "ppo", "env": {"name": "mujoco"}}, "env.name"),
        ({"algo": "ppo", "env": {"name": "nav2d", "speed": 2}}, "env"),
        ({"algo": "ppo", "optim": {"method": "rmsprop"}}, "optim.method"),
        ({"algo": "ppo", "optim": {"lr": 0.0}}, "optim"),
        (
            {"algo": "ppo", "attacks_eval": [{"kind": "pgd", "eps": -1}]},
            "attacks_eval[0].eps",
        ),
        ({"algo": "ppo", "seeds": [0, "x"]}, "seeds[1]"),
        ({"algo": "ppo", "seeds": [True]}, "seeds[0]"),
        ({"algo": {"name": "ppo", "clip": 3.0}}, "algo"),
        ({"algo": "ppo", "train": {"checkpoint_every": 0}}, "train.checkpoint_every"),
    ],
)
def test_invalid_fields(document, field):
    """Test case for errors naming the offending field path."""
    with pytest.raises(ConfigError) as error:
        parse_config(document)
    assert error.value.field == field
    assert f"[field: {field}]" in str(error.value)


def test_json_syntax_error_position():
    """Test case for line and column of malformed JSON."""
    with pytest.raises(ConfigError) as error:
        loads_config('{\n  "algo": "ppo",\n  "seeds": [0,\n}')
    assert error.value.line == 4
    assert error.value.column is not None


def test_load_config_missing_file(tmp_path):
    """Test case for unreadable configuration files."""
    with pytest.raises(ConfigError, match="Cannot read"):
        load_config(tmp_path / "absent.json")


def test_load_config_hashes_raw_bytes(config_file):
    """Test case for the digest covering the file exactly as written."""
    path = config_file()
    assert load_config(path).digest == config_hash(path.read_bytes())


def test_per_seed_train_config(config_text):
    """Test case for training configurations differing only by seed."""
    config = loads_config(config_text(seeds=[3, 4]))
    first, second = config.train_config(3), config.train_config(4)
    assert (first.seed, second.seed) == (3, 4)
    assert first.lam == second.lam


def test_with_overrides(config_text):
    """Test case for sweep overrides of lambda, neighborhood and radius."""
    config = loads_config(config_text())
    changed = config.with_overrides({"lam": 0.5, "n": 7, "eps": 0.05})
    assert changed.train.lam == 0.5
    assert changed.train.neighborhood == 7 and changed.belief.n == 7
    assert changed.train.train_eps == 0.05 and changed.belief.eps == 0.05
    assert config.train.lam == 0.2
    with pytest.raises(ConfigError) as error:
        config.with_overrides({"colour": 1})
    assert error.value.field == "colour"


def test_to_dict_is_json(config_text):
    """Test case for the resolved configuration being JSON-serializable."""
    resolved = loads_config(config_text()).to_dict()
    assert json.loads(json.dumps(resolved))["train"]["algo"] == "delta-ppo"


def test_attack_objects_and_null_sections():
    """Test case for attacks given as objects and sections given as null."""
    config = parse_config(
        {
            "algo": {"name": "delta-ppo"},
            "attack_train": {"kind": "pgd", "eps": 0.05, "k": 3},
            "attacks_eval": ["identity", {"kind": "critical-point", "N": 2}],
            "belief": None,
            "seeds": 7,
        }
    )
    assert config.attack_train.steps == 3
    assert config.train.train_eps == 0.05
    assert config.attacks_eval[1].depth == 2
    assert config.seeds == (7,) and config.eval_seeds == (7,)


def test_first_error_names_its_field():
    """Test case for several invalid sections reporting one field path."""
    with pytest.raises(ConfigError) as error:
        parse_config({"algo": "ppo", "seeds": [], "eval": {"episodes": 0}})
    assert error.value.field in ("seeds", "eval.episodes")
    with pytest.raises(ConfigError) as error:
        parse_config([1, 2])
    assert error.value.field is None
