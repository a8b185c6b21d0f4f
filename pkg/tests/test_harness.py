"""Test cases for the experiment harness."""

import json

import numpy as np
import pytest
from loguru import logger

from acoe_lab import harness
from acoe_lab.agents import PPOTrainer
from acoe_lab.attacks import AttackSpec
from acoe_lab.config import EnvConfig, load_config, loads_config
from acoe_lab.dqn import DQNTrainer
from acoe_lab.errors import (
    ConfigError,
    ContractViolation,
    NonFiniteError,
    SerializationError,
)
from acoe_lab.oracle import random_pomdp
from acoe_lab.serializers import PomdpSerializer, load_bundle, write_json

DQN_ALGO = {
    "name": "delta-dqn",
    "lam": 0.2,
    "hidden_sizes": [8],
    "learning_starts": 8,
    "minibatch": 8,
    "target_sync": 8,
}


@pytest.fixture
def trained_agent(tmp_path, config_text):
    """Fixture training a small agent once and returning its bundle directory."""
    train = {"iterations": 1, "steps_per_iteration": 16}
    config = loads_config(config_text(train=train))
    harness.train_run(config, tmp_path / "train")
    return tmp_path / "train" / "seed_0" / "bundle"


def test_metrics_writer(tmp_path):
    """Test case for header handling and non-finite rejection."""
    path = tmp_path / "metrics.csv"
    with harness.MetricsWriter(path, ("iteration", "value")) as writer:
        writer.write({"iteration": 1, "value": 0.5})
    with harness.MetricsWriter(path, ("iteration", "value")) as writer:
        writer.write({"iteration": 2, "value": 0.25})
        with pytest.raises(NonFiniteError) as error:
            writer.write({"iteration": 3, "value": float("inf")})
    assert error.value.step == 3
    assert [row["value"] for row in harness.read_csv(path)] == ["0.5", "0.25"]
    assert path.read_text().count("iteration") == 1


def test_train_run_outputs(tmp_path, config_file):
    """Test case for the files written by a training run."""
    config = load_config(config_file(seeds=[0, 1]))
    manifest = harness.train_run(config, tmp_path / "run")
    run = tmp_path / "run"
    assert (run / "config.json").read_bytes() == config.raw.encode()
    stored = harness.RunManifest.read(run / "manifest.json")
    assert stored.complete and stored.error is None
    assert stored.config_hash == config.digest
    assert stored.seeds == [0, 1]
    assert set(manifest.outputs) == {"seed_0", "seed_1"}
    rows = harness.read_csv(run / "seed_1" / "metrics.csv")
    assert [row["iteration"] for row in rows] == ["1", "2"]
    assert all(row["seed"] == "1" for row in rows)
    assert load_bundle(run / "seed_1" / "bundle").config.seed == 1
    summary = json.loads((run / "summary.json").read_text())
    assert set(summary["final"]) == {"0", "1"}


def test_training_is_deterministic(tmp_path, config_text):
    """Test case for identical metrics from identical configurations."""
    config = loads_config(config_text())
    harness.train_run(config, tmp_path / "a")
    harness.train_run(config, tmp_path / "b")
    first = (tmp_path / "a" / "seed_0" / "metrics.csv").read_text()
    second = (tmp_path / "b" / "seed_0" / "metrics.csv").read_text()
    assert first == second


@pytest.mark.parametrize(
    "algo, trainer_class", [("delta-ppo", PPOTrainer), ("delta-dqn", DQNTrainer)]
)
def test_resume_matches_uninterrupted_run(
    tmp_path, config_text, monkeypatch, algo, trainer_class
):
    """Test case for a resumed run reproducing the uninterrupted one."""
    sections = {"train": {"iterations": 3, "steps_per_iteration": 16}}
    if algo == "delta-dqn":
        sections["algo"] = DQN_ALGO
    config = loads_config(config_text(**sections))
    harness.train_run(config, tmp_path / "full")

    original = trainer_class.step

    def interrupted(self):
        if self.iteration == 2:
            raise RuntimeError("interrupted")
        return original(self)

    with monkeypatch.context() as patch:
        patch.setattr(trainer_class, "step", interrupted)
        with pytest.raises(RuntimeError):
            harness.train_run(config, tmp_path / "resumed")
    broken = harness.RunManifest.read(tmp_path / "resumed" / "manifest.json")
    assert not broken.complete
    assert broken.error == "RuntimeError: interrupted"

    harness.train_run(config, tmp_path / "resumed", resume=True)
    full = (tmp_path / "full" / "seed_0" / "metrics.csv").read_text()
    resumed = (tmp_path / "resumed" / "seed_0" / "metrics.csv").read_text()
    assert resumed == full
    first = load_bundle(tmp_path / "full" / "seed_0" / "bundle")
    second = load_bundle(tmp_path / "resumed" / "seed_0" / "bundle")
    for name, net in first.networks().items():
        for mine, theirs in zip(
            net.parameters(), getattr(second, name).parameters()
        ):
            np.testing.assert_array_equal(mine, theirs)


def test_resume_rejects_changed_config(tmp_path, config_text):
    """Test case for resuming after the configuration was edited."""
    harness.train_run(loads_config(config_text()), tmp_path)
    changed = loads_config(config_text(seeds=[5]))
    with pytest.raises(ConfigError, match="changed"):
        harness.train_run(changed, tmp_path, resume=True)


def test_training_attack_is_applied(tmp_path, config_text):
    """Test case for an adversary attached during training."""
    config = loads_config(config_text(attack_train="fgsm:eps=0.05"))
    trainer = harness.make_trainer(config, 0)
    assert trainer.adversary is not None
    assert trainer.config.train_eps == 0.05
    harness.train_run(config, tmp_path)
    checkpoint = json.loads((tmp_path / "seed_0" / "checkpoint.json").read_text())
    assert "attack" in checkpoint["streams"]
    assert "adversary" in checkpoint


def test_belief_dumps(tmp_path, config_text):
    """Test case for per-step belief dumps of a debug run."""
    harness.train_run(loads_config(config_text()), tmp_path, debug_belief=True)
    lines = (tmp_path / "seed_0" / "beliefs.jsonl").read_text().splitlines()
    assert len(lines) == 32
    dump = json.loads(lines[0])
    assert dump["source"] == "a3b" and len(dump["weights"]) == 4
    assert sum(dump["weights"]) == pytest.approx(1.0)
    assert {"iteration", "step", "delta_r"} <= set(dump)


def test_belief_dumps_for_delta_dqn(tmp_path, config_text):
    """Test case for per-step belief dumps written by a delta-DQN run."""
    text = config_text(
        algo={
            "name": "delta-dqn",
            "hidden_sizes": [8],
            "learning_starts": 8,
            "minibatch": 8,
            "target_sync": 8,
        }
    )
    harness.train_run(loads_config(text), tmp_path, debug_belief=True)
    lines = (tmp_path / "seed_0" / "beliefs.jsonl").read_text().splitlines()
    assert len(lines) == 32
    dumps = [json.loads(line) for line in lines]
    assert [dump["iteration"] for dump in dumps] == [1] * 16 + [2] * 16
    assert [dump["step"] for dump in dumps] == list(range(32))
    for dump in dumps:
        assert dump["source"] == "a3b" and len(dump["states"]) == 4
        assert sum(dump["weights"]) == pytest.approx(1.0)
        assert len(dump["scores"]) == 4
        assert -1.0 <= dump["delta_r"] <= 1.0


def test_eval_run(tmp_path, trained_agent):
    """Test case for the evaluation table and its per-episode records."""
    attacks = [AttackSpec(), AttackSpec.parse("pgd:eps=0.1,k=2")]
    rows = harness.eval_run(
        [trained_agent], attacks, tmp_path / "eval", episodes=2, seeds=(0, 1)
    )
    assert [row["attack"] for row in rows] == ["identity", "pgd:eps=0.1"]
    assert all(row["episodes"] == 4 for row in rows)
    assert rows[0]["agent"] == "delta-ppo:seed=0"
    episodes = harness.read_csv(tmp_path / "eval" / "episodes.csv")
    assert len(episodes) == 8
    report = json.loads((tmp_path / "eval" / "eval_summary.json").read_text())
    logger.info(report["table"])
    assert report["table"].splitlines()[0] == "agent | identity | pgd:eps=0.1"
    assert harness.RunManifest.read(tmp_path / "eval" / "manifest.json").complete


def test_eval_rejects_incompatible_agent(tmp_path, trained_agent):
    """Test case for agents evaluated on an environment of another shape."""
    write_json(trained_agent / "env.json", {"name": "nav1d"})
    with pytest.raises(ContractViolation, match="does not fit"):
        harness.eval_run([trained_agent], [AttackSpec()], tmp_path / "eval")
    manifest = harness.RunManifest.read(tmp_path / "eval" / "manifest.json")
    assert not manifest.complete


def test_load_agent_needs_environment(tmp_path, trained_agent):
    """Test case for bundle directories without env.json."""
    (trained_agent / "env.json").unlink()
    with pytest.raises(SerializationError, match="env.json"):
        harness.load_agent(trained_agent)


def test_attack_run(tmp_path, trained_agent):
    """Test case for per-step diagnostics of an attack."""
    spec = AttackSpec.parse("pgd:eps=0.1,k=3")
    summary = harness.attack_run(trained_agent, spec, tmp_path / "attack", episodes=2)
    assert summary["steps"] == 20
    assert 0.0 <= summary["max_linf"] <= 0.1 + 1e-12
    assert 0.0 <= summary["flip_rate"] <= 1.0
    assert summary["mean_kl"] >= 0.0
    lines = (tmp_path / "attack" / "attack_diagnostics.jsonl").read_text().splitlines()
    step = json.loads(lines[0])
    assert {"state", "observed", "linf", "clean_action", "kl"} <= set(step)


def test_run_suite_rows():
    """Test case for the verification suites."""
    thm1 = harness.run_suite("thm1", instances=3)
    assert len(thm1.rows) == 3 and thm1.violations == 0
    thm2 = harness.run_suite("thm2", instances=2)
    assert [row["instance"] for row in thm2.rows[-2:]] == [
        "drift/theorem1",
        "drift/theorem2",
    ]
    assert thm2.details["theorem2_tighter"] and thm2.violations == 0
    lemma = harness.run_suite("lemma", sizes=(10,), trials=100)
    assert len(lemma.rows) == 3
    with pytest.raises(ConfigError, match="Unknown suite"):
        harness.run_suite("thm9")


def test_verify_run(tmp_path):
    """Test case for the verification report files."""
    outcome = harness.verify_run(["prop1", "grid"], tmp_path, instances=2)
    assert outcome.violations == 0
    rows = harness.read_csv(tmp_path / "verify_summary.csv")
    assert len(rows) == 3
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert set(report["details"]) == {"prop1", "grid"}


def test_verify_instance(tmp_path):
    """Test case for checking a POMDP stored as JSON."""
    path = write_json(
        tmp_path / "instance.json",
        PomdpSerializer(random_pomdp(np.random.default_rng(2), 3)).data,
    )
    outcome = harness.verify_instance(path, eps=0.5)
    assert [row["suite"] for row in outcome.rows] == ["theorem1", "theorem2"]
    combined = harness.verify_run([], tmp_path / "out", instance=str(path))
    assert len(combined.rows) == 1 and combined.violations == 0


def test_parse_grid():
    """Test case for sweep grid flags."""
    assert harness.parse_grid(["lam=0,0.2", "n=3"]) == {"lam": [0, 0.2], "n": [3]}
    for items in ([], ["lam="], ["lam=a"], ["lam"]):
        with pytest.raises(ConfigError) as error:
            harness.parse_grid(items)
        assert error.value.field == "grid"


def test_sweep_run(tmp_path, config_text):
    """Test case for one trained and evaluated agent per grid cell."""
    train = {"iterations": 1, "steps_per_iteration": 8}
    config = loads_config(config_text(train=train))
    rows = harness.sweep_run(config, {"lam": [0.0, 0.2, 0.5]}, tmp_path)
    assert len(rows) == 6
    assert [row["cell"] for row in rows] == [0, 0, 1, 1, 2, 2]
    assert rows[2]["lam"] == 0.2
    assert rows[4]["agent"] == "cell_002/delta-ppo:seed=0"
    for index in range(3):
        assert (tmp_path / f"cell_{index:03d}" / "eval" / "eval_summary.csv").exists()
    assert len(harness.read_csv(tmp_path / "sweep.csv")) == 6
    with pytest.raises(ConfigError):
        harness.sweep_run(config, {}, tmp_path / "empty")


def test_regenerate_train(tmp_path, config_text):
    """Test case for regenerating a training run from its manifest."""
    harness.train_run(loads_config(config_text()), tmp_path / "source")
    harness.regenerate(tmp_path / "source" / "manifest.json", tmp_path / "copy")
    first = (tmp_path / "source" / "seed_0" / "metrics.csv").read_text()
    assert (tmp_path / "copy" / "seed_0" / "metrics.csv").read_text() == first
    (tmp_path / "source" / "config.json").write_text("{}")
    with pytest.raises(ConfigError, match="hash"):
        harness.regenerate(tmp_path / "source" / "manifest.json", tmp_path / "again")


def test_regenerate_eval(tmp_path, trained_agent):
    """Test case for regenerating an evaluation from its manifest."""
    harness.eval_run([trained_agent], [AttackSpec()], tmp_path / "eval", episodes=2)
    harness.regenerate(tmp_path / "eval" / "manifest.json", tmp_path / "again")
    first = (tmp_path / "eval" / "episodes.csv").read_text()
    assert (tmp_path / "again" / "episodes.csv").read_text() == first


def test_regenerate_rejects_other_commands(tmp_path, trained_agent):
    """Test case for manifests that cannot be replayed."""
    harness.attack_run(trained_agent, AttackSpec.parse("fgsm:eps=0.1"), tmp_path, 1)
    with pytest.raises(ContractViolation):
        harness.regenerate(tmp_path / "manifest.json", tmp_path / "again")


def test_env_config_round_trip(tmp_path, trained_agent):
    """Test case for the environment stored next to an agent."""
    _, env_config = harness.load_agent(trained_agent)
    assert env_config == EnvConfig(name="nav2d", options={"horizon": 10})
