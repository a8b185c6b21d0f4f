"""Experiment orchestration: training, evaluation, attacks, checks and sweeps."""

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from loguru import logger

from . import __version__, oracle, settings
from .agents import PPOTrainer, TrainConfig, attack_stream, evaluate
from .attacks import Adversary, AttackSpec, train_learned_adversary
from .config import EnvConfig, config_hash, loads_config
from .diffnet import kl_divergence
from .dqn import DQNTrainer
from .envs import TabularGridEnv
from .errors import (
    ConfigError,
    ContractViolation,
    NonFiniteError,
    SerializationError,
    VerificationFailure,
)
from .serializers import (
    DiffNetSerializer,
    EnvSnapshotSerializer,
    OptimizerSerializer,
    PomdpSerializer,
    ReplayEntrySerializer,
    deserialize,
    load_bundle,
    read_json,
    save_bundle,
    write_json,
)

TRAIN_FIELDS = (
    "seed",
    "iteration",
    "mean_return",
    "mean_delta_r",
    "mean_delta_to_go",
    "episodes",
    "policy_loss",
    "value_loss",
    "q_loss",
    "delta_loss",
)
EPISODE_FIELDS = (
    "agent",
    "attack",
    "seed",
    "episode",
    "return",
    "length",
    "attacked_steps",
)
SUMMARY_FIELDS = ("agent", "attack", "mean", "std", "episodes")
VERIFY_FIELDS = ("suite", "instance", "bound", "max_lhs", "margin", "passed")
SUITES = ("thm1", "thm2", "prop1", "lemma", "grid")


def _now():
    return datetime.now(timezone.utc).isoformat()


class MetricsWriter:
    """
    Append-only CSV with a fixed column set; rows are flushed as they arrive.

    Each file has a single owner; cells missing from a row stay empty.
    """

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._stream = self.path.open("a", newline="")
        self._writer = csv.DictWriter(
            self._stream, fieldnames=fieldnames, restval="", extrasaction="ignore"
        )
        if fresh:
            self._writer.writeheader()
            self._stream.flush()

    def write(self, row):
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                logger.error(f"Refusing non-finite metric {key}={value}")
                raise NonFiniteError(key, value, row.get("iteration"))
        self._writer.writerow(row)
        self._stream.flush()

    def close(self):
        self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


def read_csv(path):
    with open(path, newline="") as stream:
        return list(csv.DictReader(stream))


def write_rows(path, rows, fieldnames):
    """Write a whole CSV table at once."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as stream:
        writer = csv.DictWriter(stream, fieldnames=fieldnames, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def truncate_metrics(path, iteration):
    """Drop rows recorded after the checkpointed iteration."""
    path = Path(path)
    if not path.exists():
        return
    rows = [row for row in read_csv(path) if int(row["iteration"]) <= iteration]
    write_rows(path, rows, TRAIN_FIELDS)


@dataclass
class RunManifest:
    """
    Record of one command invocation, enough to regenerate its metrics.

    Attributes:
        command (str): "train", "eval", "attack", "verify" or "sweep".
        config_hash (str): SHA-256 of the stored configuration or arguments.
        seeds (list[int]): Seeds used.
        arguments (dict): Command arguments besides the configuration.
        code_version (str): Package version that produced the run.
        started (str): UTC start timestamp.
        finished (str | None): UTC end timestamp.
        complete (bool): False until the run finished without error.
        outputs (dict): Output paths relative to the run directory.
        attacks (list[str]): Attack labels involved.
        summary (dict): Final metric summary.
        error (str | None): Failure description of an incomplete run.
    """

    command: str
    config_hash: str
    seeds: list
    arguments: dict = field(default_factory=dict)
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str | None = None
    complete: bool = False
    outputs: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    error: str | None = None

    def write(self, directory):
        return write_json(Path(directory) / "manifest.json", asdict(self))

    def finish(self, directory, error=None):
        self.finished = _now()
        self.complete = error is None
        self.error = error
        return self.write(directory)

    @classmethod
    def read(cls, path):
        data = read_json(path)
        try:
            return cls(**data)
        except TypeError as e:
            raise SerializationError(f"{path} is not a run manifest: {e}") from e


def _run(manifest, directory, body):
    """Run `body`, closing the manifest as complete or flagged incomplete."""
    manifest.write(directory)
    try:
        result = body()
    except Exception as e:
        logger.error(f"{manifest.command} failed: {e}")
        manifest.finish(directory, error=f"{type(e).__name__}: {e}")
        raise
    manifest.finish(directory)
    logger.success(f"{manifest.command} finished; outputs in {directory}")
    return result


def save_agent(bundle, env_config, directory):
    """Save a bundle together with the environment it was trained on."""
    save_bundle(bundle, directory)
    write_json(Path(directory) / "env.json", env_config.to_dict())
    return Path(directory)


def load_agent(directory):
    """
    Load a bundle and its environment configuration.

    Raises:
        SerializationError: If the directory is not a saved agent.
    """

    bundle = load_bundle(directory)
    env_path = Path(directory) / "env.json"
    if not env_path.exists():
        raise SerializationError(f"{directory} has no env.json")
    options = dict(read_json(env_path))
    return bundle, EnvConfig(name=options.pop("name", "nav2d"), options=options)


def check_compatible(bundle, env):
    policy = bundle.acting_policy
    expected = env.n_actions if env.discrete else env.action_dim
    if policy.input_dim != env.obs_dim or policy.output_dim != expected:
        raise ContractViolation(
            f"Agent {policy.input_dim}->{policy.output_dim} does not fit "
            f"environment {env.obs_dim}->{expected}"
        )


def save_checkpoint(trainer, path):
    """Write everything needed to continue training bit-identically."""
    data = {
        "algo": trainer.config.algo,
        "iteration": trainer.iteration,
        "streams": trainer.streams.state(),
        "networks": {
            name: DiffNetSerializer(net).data
            for name, net in trainer.bundle.networks().items()
        },
        "optimizers": {
            name: OptimizerSerializer(optimizer).data
            for name, optimizer in trainer.optimizers.items()
        },
    }
    if isinstance(trainer, DQNTrainer):
        data["dqn"] = {
            "total_steps": trainer.total_steps,
            "episode_return": trainer.episode_return,
            "state": None if trainer.state is None else trainer.state.tolist(),
            "env": EnvSnapshotSerializer(trainer.env.snapshot()).data,
            "replay": [
                ReplayEntrySerializer(entry).data for entry in trainer.replay.entries
            ],
        }
    if trainer.adversary is not None:
        data["adversary"] = {
            "budget_used": trainer.adversary.budget_used,
            "attacked_steps": trainer.adversary.attacked_steps,
        }
    return write_json(path, data)


def load_checkpoint(trainer, path):
    """Restore a trainer in place from `save_checkpoint` output."""
    data = read_json(path)
    if data.get("algo") != trainer.config.algo:
        raise SerializationError(
            f"Checkpoint of {data.get('algo')!r} cannot resume {trainer.config.algo!r}"
        )
    for name, document in data["networks"].items():
        getattr(trainer.bundle, name).load_from(
            deserialize(DiffNetSerializer, document)
        )
    for name, document in data["optimizers"].items():
        net = getattr(trainer.bundle, name)
        trainer.optimizers[name] = deserialize(OptimizerSerializer, document, net=net)
    trainer.streams.load_state(data["streams"])
    trainer.iteration = int(data["iteration"])
    if "dqn" in data:
        extra = data["dqn"]
        trainer.total_steps = int(extra["total_steps"])
        trainer.episode_return = float(extra["episode_return"])
        state = extra["state"]
        trainer.state = None if state is None else np.asarray(state, dtype=np.float64)
        trainer.env.restore(deserialize(EnvSnapshotSerializer, extra["env"]))
        trainer.replay.entries.clear()
        for document in extra["replay"]:
            trainer.replay.add(deserialize(ReplayEntrySerializer, document))
    if "adversary" in data and trainer.adversary is not None:
        trainer.adversary.budget_used = data["adversary"]["budget_used"]
        trainer.adversary.attacked_steps = data["adversary"]["attacked_steps"]
    return trainer


def make_trainer(run_config, seed, debug_belief=False):
    env = run_config.env.build()
    config = run_config.train_config(seed)
    if config.algo in ("ppo", "delta-ppo"):
        trainer = PPOTrainer(env, config, debug_belief=debug_belief)
    else:
        trainer = DQNTrainer(env, config, debug_belief=debug_belief)
    spec = run_config.attack_train
    if spec.kind != "identity" and spec.eps > 0:
        trainer.adversary = Adversary(
            spec, env.bounds, env.horizon, trainer.streams["attack"]
        )
    return trainer


def _append_belief_dumps(path, trainer):
    if isinstance(trainer, DQNTrainer):
        dumps = trainer.last_beliefs
    else:
        dumps = itertools.chain.from_iterable(
            trajectory.beliefs or [] for trajectory in trainer.last_trajectories
        )
    with open(path, "a") as stream:
        for dump in dumps:
            stream.write(json.dumps({"iteration": trainer.iteration, **dump}))
            stream.write("\n")


def train_seed(run_config, seed, directory, resume=False, debug_belief=False):
    """
    Train one agent, checkpointing as configured, and save its bundle.

    Returns:
        dict: Bundle path and the final metrics row.
    """

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(run_config, seed, debug_belief)
    checkpoint = directory / "checkpoint.json"
    metrics = directory / "metrics.csv"
    beliefs = directory / "beliefs.jsonl"
    if resume and checkpoint.exists():
        load_checkpoint(trainer, checkpoint)
        truncate_metrics(metrics, trainer.iteration)
        logger.info(f"Resumed seed {seed} at iteration {trainer.iteration}")
    else:
        for stale in (metrics, beliefs, checkpoint):
            stale.unlink(missing_ok=True)
    total = trainer.config.iterations

    with MetricsWriter(metrics, TRAIN_FIELDS) as writer:

        def record(trainer, row):
            writer.write({"seed": seed, **row})
            if debug_belief:
                _append_belief_dumps(beliefs, trainer)
            every = run_config.checkpoint_every
            if trainer.iteration % every == 0 or trainer.iteration == total:
                save_checkpoint(trainer, checkpoint)

        logger.info(f"Training {trainer.config.algo} seed {seed}: {total} iterations")
        trainer.run(callback=record)

    bundle_dir = save_agent(trainer.bundle, run_config.env, directory / "bundle")
    rows = read_csv(metrics)
    return {"bundle": bundle_dir, "final": rows[-1] if rows else {}}


def train_run(run_config, output_dir, resume=False, debug_belief=False):
    """
    Train one agent per configured seed.

    The run directory receives the configuration byte-for-byte, a manifest, and
    per seed a metrics CSV, a checkpoint and the final bundle.

    Raises:
        ConfigError: When resuming with a configuration that changed.
    """

    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    previous = output / "manifest.json"
    if resume and previous.exists():
        stored = RunManifest.read(previous).config_hash
        if stored != run_config.digest:
            raise ConfigError("Configuration changed since the interrupted run")
    (output / "config.json").write_bytes(run_config.raw.encode())
    manifest = RunManifest(
        command="train",
        config_hash=run_config.digest,
        seeds=list(run_config.seeds),
        arguments={"debug_belief": debug_belief, "resolved": run_config.to_dict()},
        attacks=[run_config.attack_train.label],
    )

    def body():
        finals = {}
        for seed in run_config.seeds:
            seed_dir = output / f"seed_{seed}"
            result = train_seed(run_config, seed, seed_dir, resume, debug_belief)
            manifest.outputs[f"seed_{seed}"] = {
                "metrics": str((seed_dir / "metrics.csv").relative_to(output)),
                "bundle": str(result["bundle"].relative_to(output)),
            }
            finals[str(seed)] = result["final"]
        manifest.summary = {"final": finals}
        write_json(output / "summary.json", manifest.summary)
        return manifest

    return _run(manifest, output, body)


def _learned(spec, bundle, env, iterations):
    if spec.kind != "learned":
        return None
    config = TrainConfig(algo="ppo", iterations=iterations, seed=bundle.config.seed)
    victim = bundle.acting_policy
    return train_learned_adversary(victim, env, spec.eps, spec.directions, config)


def format_table(rows):
    """One line per agent with "mean +- std" per attack column."""
    attacks = list(dict.fromkeys(row["attack"] for row in rows))
    agents = list(dict.fromkeys(row["agent"] for row in rows))
    cells = {(row["agent"], row["attack"]): row for row in rows}
    lines = [" | ".join(["agent", *attacks])]
    for agent in agents:
        values = []
        for attack in attacks:
            row = cells.get((agent, attack))
            if row is None:
                values.append("")
            else:
                values.append(f"{row['mean']:.3f} +- {row['std']:.3f}")
        lines.append(" | ".join([agent, *values]))
    return "\n".join(lines)


def eval_run(
    agents,
    attacks,
    output_dir,
    episodes=50,
    seeds=(0,),
    workers=1,
    learned_iterations=5,
):
    """
    Evaluate saved agents under each attack; one summary row per (agent, attack).

    Args:
        agents (list[Path]): Agent directories written by `save_agent`.
        attacks (list[AttackSpec]): Attacks forming the table columns.
        output_dir (Path): Run directory.
        episodes (int): Episodes per seed.
        seeds (Iterable[int]): Evaluation seeds.
        workers (int): Parallel episodes.
        learned_iterations (int): PPO iterations of learned adversaries.

    Returns:
        list[dict]: Summary rows.
    """

    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    arguments = {
        "agents": [str(Path(agent).resolve()) for agent in agents],
        "attacks": [spec.to_dict() for spec in attacks],
        "episodes": episodes,
        "seeds": list(seeds),
        "workers": workers,
        "learned_iterations": learned_iterations,
    }
    manifest = RunManifest(
        command="eval",
        config_hash=config_hash(json.dumps(arguments, sort_keys=True)),
        seeds=list(seeds),
        arguments=arguments,
        attacks=[spec.label for spec in attacks],
    )

    def body():
        episodes_path = output / "episodes.csv"
        episodes_path.unlink(missing_ok=True)
        summary = []
        with MetricsWriter(episodes_path, EPISODE_FIELDS) as writer:
            for path in agents:
                bundle, env_config = load_agent(path)
                env = env_config.build()
                check_compatible(bundle, env)
                agent = f"{bundle.algo}:seed={bundle.config.seed}"
                for spec in attacks:
                    learned = _learned(spec, bundle, env, learned_iterations)
                    result = evaluate(
                        bundle, env, spec, episodes, seeds, learned, workers
                    )
                    for record in result.records:
                        writer.write({"agent": agent, **record})
                    summary.append({"agent": agent, **result.summary()})
        write_rows(output / "eval_summary.csv", summary, SUMMARY_FIELDS)
        table = format_table(summary)
        write_json(output / "eval_summary.json", {"rows": summary, "table": table})
        manifest.outputs = {
            "episodes": "episodes.csv",
            "summary": "eval_summary.csv",
        }
        manifest.summary = {"table": table}
        return summary

    return _run(manifest, output, body)


def attack_run(agent, spec, output_dir, episodes=5, seed=0, learned_iterations=5):
    """
    Attack a frozen agent and dump per-step perturbation diagnostics.

    Each JSON line holds the true state, the perturbed observation, the L-infinity
    size of the perturbation, clean and attacked greedy actions and their KL.
    """

    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    arguments = {
        "agent": str(Path(agent).resolve()),
        "attack": spec.to_dict(),
        "episodes": episodes,
        "seed": seed,
    }
    manifest = RunManifest(
        command="attack",
        config_hash=config_hash(json.dumps(arguments, sort_keys=True)),
        seeds=[seed],
        arguments=arguments,
        attacks=[spec.label],
    )

    def body():
        bundle, env_config = load_agent(agent)
        env = env_config.build()
        check_compatible(bundle, env)
        policy = bundle.acting_policy
        learned = _learned(spec, bundle, env, learned_iterations)
        steps, returns = [], []
        path = output / "attack_diagnostics.jsonl"
        with open(path, "w") as stream:
            for episode in range(episodes):
                adversary = Adversary(
                    spec, env.bounds, env.horizon, attack_stream(seed, episode), learned
                )
                state = env.reset([seed, episode])
                adversary.reset()
                done, total, t = False, 0.0, 0
                while not done:
                    observed = adversary(policy, state, env)
                    clean = policy.distribution(state)
                    attacked = policy.distribution(observed)
                    clean_action, attacked_action = clean.mode(), attacked.mode()
                    state_before = state
                    state, reward, done = env.step(attacked_action)
                    total += reward
                    step = {
                        "episode": episode,
                        "step": t,
                        "state": np.asarray(state_before).tolist(),
                        "observed": np.asarray(observed).tolist(),
                        "linf": float(np.max(np.abs(observed - state_before))),
                        "clean_action": np.asarray(clean_action).tolist(),
                        "attacked_action": np.asarray(attacked_action).tolist(),
                        "kl": kl_divergence(clean, attacked),
                        "reward": reward,
                    }
                    stream.write(json.dumps(step) + "\n")
                    steps.append(step)
                    t += 1
                returns.append(total)
        flips = [s["clean_action"] != s["attacked_action"] for s in steps]
        summary = {
            "attack": spec.label,
            "steps": len(steps),
            "mean_linf": float(np.mean([s["linf"] for s in steps])),
            "max_linf": float(np.max([s["linf"] for s in steps])),
            "flip_rate": float(np.mean(flips)),
            "mean_kl": float(np.mean([s["kl"] for s in steps])),
            "mean_return": float(np.mean(returns)),
        }
        write_json(output / "attack_summary.json", summary)
        manifest.outputs = {
            "diagnostics": path.name,
            "summary": "attack_summary.json",
        }
        manifest.summary = summary
        return summary

    return _run(manifest, output, body)


def _report_row(suite, instance, report):
    return {
        "suite": suite,
        "instance": instance,
        "bound": report.bound,
        "max_lhs": report.max_lhs,
        "margin": report.margin,
        "passed": report.passed,
    }


@dataclass
class VerifyOutcome:
    """Rows of the verification table and the number of failed checks."""

    rows: list
    violations: int
    details: dict


def run_suite(
    name, instances=None, seed=0, depth=2, sizes=(10, 100, 1000), trials=1000
):
    """
    Run one verification suite.

    Returns:
        VerifyOutcome: Table rows, failures and JSON-ready details.
    """

    rows, details, violations = [], {}, 0
    if name == "thm1":
        reports = oracle.theorem1_suite(instances or 100, seed, depth)
        rows = [_report_row(name, i, r) for i, r in enumerate(reports)]
        details["violations"] = [r.violations for r in reports if not r.passed]
        details["constants"] = [r.constants for r in reports]
        violations = sum(not r.passed for r in reports)
    elif name == "thm2":
        reports, comparison = oracle.theorem2_suite(instances or 50, seed, depth)
        rows = [_report_row(name, i, r) for i, r in enumerate(reports)]
        for key, report in comparison.items():
            rows.append(_report_row(name, f"drift/{key}", report))
        tighter = comparison["theorem2"].bound < comparison["theorem1"].bound
        details["comparison"] = {
            key: {"bound": report.bound, "constants": report.constants}
            for key, report in comparison.items()
        }
        details["theorem2_tighter"] = tighter
        violations = sum(not r.passed for r in reports + list(comparison.values()))
        violations += int(not tighter)
    elif name == "prop1":
        try:
            reports = oracle.proposition1_suite(instances or 20, seed)
        except VerificationFailure as e:
            details["counterexample"] = e.counterexample
            rows = [{"suite": name, "instance": "-", "passed": False}]
            return VerifyOutcome(rows, 1, details)
        for index, report in enumerate(reports):
            rows.append(
                {
                    "suite": name,
                    "instance": index,
                    "bound": settings.DELTA_STAR_TOLERANCE,
                    "max_lhs": report["max_gap"],
                    "margin": settings.DELTA_STAR_TOLERANCE - report["max_gap"],
                    "passed": report["passed"],
                }
            )
    elif name == "lemma":
        reports = oracle.lemma_suite(sizes, trials, seed)
        for report in reports:
            reward = report["quadrature_reward"]
            gap = abs(report["estimate_mean"] - reward)
            bound = report["band"] * abs(reward) + 3.0 * report["estimate_se"]
            rows.append(
                {
                    "suite": name,
                    "instance": f"{report['case']}/n={report['n']}",
                    "bound": bound,
                    "max_lhs": gap,
                    "margin": bound - gap,
                    "passed": report["passed"],
                }
            )
        violations = sum(not report["passed"] for report in reports)
        details["reports"] = reports
    elif name == "grid":
        pomdp = oracle.grid_pomdp(TabularGridEnv.cliff())
        report = oracle.verify_theorem1(pomdp, depth=depth)
        rows = [_report_row(name, "cliff", report)]
        violations = int(not report.passed)
        details["violations"] = report.violations
    else:
        raise ConfigError(f"Unknown suite {name!r}; expected one of {SUITES}", "suite")
    return VerifyOutcome(rows, violations, details)


def verify_instance(path, depth=2, eps=None):
    """Check the bounds on a FinitePOMDP saved as JSON."""
    pomdp = deserialize(PomdpSerializer, read_json(path))
    reports = [oracle.verify_theorem1(pomdp, depth=depth)]
    if pomdp.positions is not None and eps is not None:
        reports.append(oracle.verify_theorem2(pomdp, eps, depth=depth))
    rows = [_report_row(report.name, Path(path).name, report) for report in reports]
    violations = sum(not report.passed for report in reports)
    details = {"violations": [report.violations for report in reports]}
    return VerifyOutcome(rows, violations, details)


def verify_run(suites, output_dir, instance=None, **options):
    """
    Run verification suites and write a JSON report plus a summary CSV.

    Returns:
        VerifyOutcome: Combined rows and the total violation count.
    """

    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    arguments = {"suites": list(suites), "instance": instance, **options}
    manifest = RunManifest(
        command="verify",
        config_hash=config_hash(json.dumps(arguments, sort_keys=True, default=str)),
        seeds=[options.get("seed", 0)],
        arguments=arguments,
    )

    def body():
        rows, violations, details = [], 0, {}
        outcomes = [(name, run_suite(name, **options)) for name in suites]
        if instance is not None:
            depth = options.get("depth", 2)
            outcomes.append(("instance", verify_instance(instance, depth)))
        for name, outcome in outcomes:
            rows.extend(outcome.rows)
            violations += outcome.violations
            details[name] = outcome.details
            logger.info(f"Suite {name}: {outcome.violations} violations")
        write_rows(output / "verify_summary.csv", rows, VERIFY_FIELDS)
        write_json(output / "verify_report.json", {"rows": rows, "details": details})
        manifest.outputs = {
            "summary": "verify_summary.csv",
            "report": "verify_report.json",
        }
        manifest.summary = {"violations": violations, "checks": len(rows)}
        return VerifyOutcome(rows, violations, details)

    return _run(manifest, output, body)


def parse_grid(items):
    """
    Parse `name=v1,v2,...` items into a sweep grid.

    Raises:
        ConfigError: On an empty grid or a malformed item.
    """

    grid = {}
    for item in items or []:
        name, sep, raw = item.partition("=")
        values = [value.strip() for value in raw.split(",") if value.strip()]
        if not sep or not values:
            raise ConfigError(f"Malformed grid item {item!r}", field="grid")
        parsed = []
        for value in values:
            try:
                parsed.append(int(value))
            except ValueError:
                try:
                    parsed.append(float(value))
                except ValueError as e:
                    raise ConfigError(f"Non-numeric value {value!r}", "grid") from e
        grid[name.strip()] = parsed
    if not grid:
        raise ConfigError("Sweep grid must not be empty", field="grid")
    return grid


def sweep_run(run_config, grid, output_dir):
    """
    Train and evaluate one cell per grid point; aggregate into `sweep.csv`.

    Raises:
        ConfigError: If the grid is empty.
    """

    if not grid or any(not values for values in grid.values()):
        raise ConfigError("Sweep grid must not be empty", field="grid")
    output = Path(output_dir)
    output.mkdir(parents=True, exist_ok=True)
    names = list(grid)
    cells = list(itertools.product(*(grid[name] for name in names)))
    manifest = RunManifest(
        command="sweep",
        config_hash=run_config.digest,
        seeds=list(run_config.seeds),
        arguments={"grid": grid},
        attacks=[spec.label for spec in run_config.attacks_eval],
    )

    def body():
        rows = []
        for index, values in enumerate(cells):
            overrides = dict(zip(names, values))
            logger.info(f"Sweep cell {index + 1}/{len(cells)}: {overrides}")
            cell_config = run_config.with_overrides(overrides)
            cell_dir = output / f"cell_{index:03d}"
            train_run(cell_config, cell_dir / "train")
            agents = [
                cell_dir / "train" / f"seed_{seed}" / "bundle"
                for seed in cell_config.seeds
            ]
            summary = eval_run(
                agents,
                cell_config.attacks_eval,
                cell_dir / "eval",
                cell_config.episodes,
                cell_config.eval_seeds,
                cell_config.eval_workers,
                cell_config.learned_iterations,
            )
            for row in summary:
                agent = f"cell_{index:03d}/{row['agent']}"
                rows.append({"cell": index, **overrides, **row, "agent": agent})
        write_rows(output / "sweep.csv", rows, ["cell", *names, *SUMMARY_FIELDS])
        manifest.outputs = {"sweep": "sweep.csv"}
        manifest.summary = {"cells": len(cells), "rows": len(rows)}
        return rows

    return _run(manifest, output, body)


def regenerate(manifest_path, output_dir):
    """
    Re-run a train or eval command from its manifest into a new directory.

    Raises:
        ConfigError: If the stored configuration no longer matches its hash.
    """

    manifest = RunManifest.read(manifest_path)
    source = Path(manifest_path).parent
    arguments = manifest.arguments
    if manifest.command == "train":
        raw = (source / "config.json").read_bytes()
        if config_hash(raw) != manifest.config_hash:
            raise ConfigError("Stored configuration does not match the manifest hash")
        run_config = loads_config(raw.decode())
        return train_run(
            run_config, output_dir, debug_belief=arguments.get("debug_belief", False)
        )
    if manifest.command == "eval":
        return eval_run(
            [Path(agent) for agent in arguments["agents"]],
            [AttackSpec.from_dict(spec) for spec in arguments["attacks"]],
            output_dir,
            arguments["episodes"],
            arguments["seeds"],
            arguments["workers"],
            arguments["learned_iterations"],
        )
    raise ContractViolation(f"Cannot regenerate a {manifest.command!r} run")
