"""Command-line interface: train, eval, attack, verify and sweep subcommands."""

import argparse
import sys
from datetime import datetime, timezone
from pathlib import Path

from loguru import logger

from . import __version__, harness, settings
from .attacks import AttackSpec
from .config import DEFAULT_EVAL_ATTACKS, load_config
from .errors import (
    AcoeError,
    ConfigError,
    ContractViolation,
    SerializationError,
    VerificationFailure,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_FAILURE = 3


class UsageError(AcoeError):
    """Bad command-line arguments."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_seed_list(raw):
    """
    Parse `0,1,2` (or `;`-separated) seeds, dropping duplicates.

    Raises:
        UsageError: If no seed is given or one is not an integer.
    """

    seeds = []
    for part in str(raw or "").replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            seeds.append(int(part))
        except ValueError as e:
            raise UsageError(f"Seed {part!r} is not an integer") from e
    if not seeds:
        raise UsageError("No valid seeds provided")
    return sorted(set(seeds))


def parse_attack(raw):
    try:
        return AttackSpec.parse(raw)
    except ContractViolation as e:
        raise UsageError(f"Bad --attack {raw!r}: {e}") from e


def default_output(command):
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return Path(settings.OUTPUT_ROOT) / f"{command}_{stamp}"


def build_parser():
    parser = ArgumentParser(
        prog="acoe-lab",
        description="Train, attack and verify robust agents at desk scale.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--output",
        type=Path,
        default=None,
        help="Run directory (default: $ACOE_OUTPUT_ROOT/<command>_<timestamp>)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser(
        "train", parents=[common], help="Train one agent per configured seed"
    )
    train.add_argument("config", type=Path, help="JSON run configuration")
    train.add_argument(
        "--resume",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="Continue from the checkpoints in --output",
    )
    train.add_argument(
        "--debug-belief",
        action="store_true",
        help="Dump per-step particle beliefs as JSON lines",
    )

    evaluate = commands.add_parser(
        "eval", parents=[common], help="Evaluate saved agents under attacks"
    )
    evaluate.add_argument(
        "--agent",
        type=Path,
        action="append",
        default=[],
        help="Agent directory; repeat for several agents",
    )
    evaluate.add_argument(
        "--attack",
        action="append",
        default=[],
        help="Attack flag such as kind=pgd,eps=0.1,k=10; repeatable",
    )
    evaluate.add_argument(
        "--config",
        type=Path,
        help="Take attacks, episodes, seeds and workers from a run configuration",
    )
    evaluate.add_argument("--episodes", type=int, default=None)
    evaluate.add_argument("--seeds", type=str, default=None, help="e.g. 0,1,2,3,4")
    evaluate.add_argument("--workers", type=int, default=None)
    evaluate.add_argument("--learned-iterations", type=int, default=None)
    evaluate.add_argument(
        "--manifest",
        type=Path,
        help="Re-run the train or eval command recorded in this manifest",
    )

    attack = commands.add_parser(
        "attack", parents=[common], help="Attack a frozen agent, dump steps"
    )
    attack.add_argument("--agent", type=Path, required=True)
    attack.add_argument("--attack", required=True, help="Attack flag")
    attack.add_argument("--episodes", type=int, default=5)
    attack.add_argument("--seed", type=int, default=0)
    attack.add_argument("--learned-iterations", type=int, default=5)

    verify = commands.add_parser(
        "verify", parents=[common], help="Run theorem and lemma checks"
    )
    verify.add_argument(
        "--suite",
        action="append",
        choices=harness.SUITES + ("all",),
        default=[],
        help="Suite to run; repeatable",
    )
    verify.add_argument("--instances", type=int, default=None)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--depth", type=int, default=2)
    verify.add_argument(
        "--n",
        type=int,
        action="append",
        default=[],
        help="Sample size of the lemma suite; repeatable",
    )
    verify.add_argument("--trials", type=int, default=1000)
    verify.add_argument(
        "--instance", type=Path, help="FinitePOMDP JSON file to check as well"
    )

    sweep = commands.add_parser(
        "sweep", parents=[common], help="Train and evaluate over a grid"
    )
    sweep.add_argument("config", type=Path)
    sweep.add_argument(
        "--grid",
        action="append",
        default=[],
        help="Parameter values, e.g. lam=0.1,0.2,0.3; repeatable",
    )
    return parser


def configure_logging():
    logger.remove()
    logger.add(sys.stderr, level=settings.LOG_LEVEL)
    if settings.LOG_FILE:
        logger.add(settings.LOG_FILE, level="DEBUG")


def run_train(args, output):
    run_config = load_config(args.config)
    harness.train_run(run_config, output, args.resume, args.debug_belief)
    return EXIT_OK


def run_eval(args, output):
    if args.manifest is not None:
        harness.regenerate(args.manifest, output)
        return EXIT_OK
    if not args.agent:
        raise UsageError("eval needs --agent or --manifest")
    attacks = [parse_attack(raw) for raw in args.attack]
    episodes, seeds, workers, learned_iterations = 50, [0], 1, 5
    if args.config is not None:
        run_config = load_config(args.config)
        attacks = attacks or list(run_config.attacks_eval)
        episodes = run_config.episodes
        seeds = list(run_config.eval_seeds)
        workers = run_config.eval_workers
        learned_iterations = run_config.learned_iterations
    attacks = attacks or [AttackSpec.parse(raw) for raw in DEFAULT_EVAL_ATTACKS]
    if args.episodes is not None:
        episodes = args.episodes
    if args.seeds is not None:
        seeds = parse_seed_list(args.seeds)
    if args.workers is not None:
        workers = args.workers
    if args.learned_iterations is not None:
        learned_iterations = args.learned_iterations
    if episodes < 1 or workers < 1:
        raise UsageError("--episodes and --workers must be positive")
    rows = harness.eval_run(
        args.agent, attacks, output, episodes, seeds, workers, learned_iterations
    )
    print(harness.format_table(rows))
    return EXIT_OK


def run_attack(args, output):
    summary = harness.attack_run(
        args.agent,
        parse_attack(args.attack),
        output,
        args.episodes,
        args.seed,
        args.learned_iterations,
    )
    for key, value in summary.items():
        print(f"{key}: {value}")
    return EXIT_OK


def run_verify(args, output):
    suites = args.suite or ["all"]
    if "all" in suites:
        suites = list(harness.SUITES)
    if args.instance is not None and not args.suite:
        suites = []
    options = {"seed": args.seed, "depth": args.depth, "trials": args.trials}
    if args.instances is not None:
        options["instances"] = args.instances
    if args.n:
        options["sizes"] = tuple(args.n)
    outcome = harness.verify_run(suites, output, args.instance, **options)
    for row in outcome.rows:
        status = "ok" if row["passed"] else "VIOLATED"
        print(f"{row['suite']:<6} {row['instance']!s:<32} {status}")
    if outcome.violations:
        logger.error(f"{outcome.violations} verification checks failed")
        return EXIT_VIOLATION
    logger.success("All verification checks passed")
    return EXIT_OK


def run_sweep(args, output):
    grid = harness.parse_grid(args.grid)
    run_config = load_config(args.config)
    rows = harness.sweep_run(run_config, grid, output)
    print(harness.format_table(rows))
    return EXIT_OK


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "attack": run_attack,
    "verify": run_verify,
    "sweep": run_sweep,
}


def main(argv=None):
    """
    Parse arguments, run one subcommand and return its exit code.

    Returns:
        int: 0 on success, 1 on usage or configuration errors, 2 when a
        verification check fails and 3 on any other failure.
    """

    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        output = args.output or default_output(args.command)
        return COMMANDS[args.command](args, output)
    except (UsageError, ConfigError, SerializationError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except VerificationFailure as e:
        logger.error(f"Verification failed: {e}")
        return EXIT_VIOLATION
    except Exception as e:
        logger.exception(f"Run failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
