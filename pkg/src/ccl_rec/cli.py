"""
Command-line interface.

Every subcommand takes ``--config PATH`` (YAML) and any number of
``--key value`` / ``--section.key value`` overrides. Exit codes: 0 on
success, 1 on a runtime failure, 2 on a usage or configuration problem.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import __version__
from .augment import DUMP_HEADER, Polarity, StrategyState, construct, format_dump, summarize
from .config import RunConfig, describe_fields, load_config
from .data import load_dataset, sample_substitute_pool, substream
from .errors import CclRecError, ConfigError
from .evaluation import evaluate, export_case_study, format_epoch_line, format_metrics_line
from .model import ModelParams, load_checkpoint, score_sequence, score_substitutes
from .train import compare_strategies, run as run_training, run_ablation


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

DATA_NOTE = (
    "The dataset comes from the run configuration. Without a synthetic section, pass\n"
    "--data.interactions PATH and --data.features PATH to choose the logs to read."
)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class UsageError(CclRecError):
    """Bad command-line input discovered after parsing (missing files, unknown user)."""


def setup_logging(level: str) -> None:
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level: {level}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, stream=sys.stderr, force=True)


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """``["--strategy", "harder", "--train.n_p=4"]`` -> ``{"strategy": "harder", "train.n_p": "4"}``"""
    overrides: Dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or token == "--":
            raise ConfigError(f"unexpected argument: {token}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def _require_file(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    resume = _require_file(args.resume, "resume") if args.resume is not None else None
    result = run_training(config, resume=resume)
    last = result.evaluations[-1]
    if last is not None:
        print(format_epoch_line(len(result.evaluations) - 1, last))
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    params = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = load_dataset(config)
    result = evaluate(params, dataset.features, dataset.heldout, config.evaluation.k)
    print(format_metrics_line(result))
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = load_dataset(config)
    train = config.train
    if args.checkpoint is not None:
        params = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    else:
        params = ModelParams.initialize(dataset.features.dim, substream(train.seed, "init"))

    candidates = [inst for inst in dataset.train if len(inst.history) >= 2]
    if args.user is not None:
        candidates = [inst for inst in candidates if inst.user == args.user]
    if not candidates:
        who = f"user {args.user}" if args.user is not None else "any user"
        raise UsageError(f"{who} has no training instance with at least two clicks")
    instance = candidates[-1]

    state = StrategyState(train.strategy, args.progress, train.n_r)
    pool = sample_substitute_pool(dataset.n_items, train.n_z, None, substream(train.seed, "inspect_pool"))
    scored = score_sequence(params, dataset.features, instance.history)
    beta = score_substitutes(params, scored, pool, dataset.features)
    rng = substream(train.seed, "inspect", instance.user)
    samples = construct(scored, beta, pool, Polarity.POSITIVE, args.n, state, rng, instance.user)
    samples += construct(scored, beta, pool, Polarity.NEGATIVE, args.n, state, rng, instance.user)

    print(DUMP_HEADER)
    for line in format_dump(samples):
        print(line)
    for polarity, stats in summarize(samples).items():
        print(f"# {polarity} count={int(stats['count'])} mean={stats['mean']:.6f} min={stats['min']:.6f} max={stats['max']:.6f}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace, config: RunConfig) -> int:
    params = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = load_dataset(config)
    rows = export_case_study(params, dataset.features, dataset.heldout, config, args.out, args.users)
    print(f"wrote {rows} rows to {args.out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    out = args.out if args.out is not None else config.output.dir
    for strategy, result in compare_strategies(config, out).items():
        print(f"{strategy.value} {result.final_auc:.6f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    out = args.out if args.out is not None else config.output.dir
    for name, scores in run_ablation(config, args.seeds, out).items():
        print(name + " " + " ".join(f"{s:.6f}" for s in scores))
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect-augmentations": cmd_inspect,
    "export-embeddings": cmd_export,
    "compare-strategies": cmd_compare,
    "ablate": cmd_ablate,
}


# ============================================================================
# PARSER
# ============================================================================

def _epilog() -> str:
    return "config keys (override with --key value or --section.key value):\n" + "\n".join(describe_fields())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccl-rec",
        description="Hardness-aware contrastive training for click-through sequential recommendation.",
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = subparsers.add_parser(
            name,
            help=help_text,
            description=f"{help_text}\n\n{DATA_NOTE}",
            epilog=_epilog(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
            allow_abbrev=False,
        )
        sub.add_argument("--config", type=Path, default=None, help="YAML run configuration (default: none)")
        sub.add_argument("--env-file", type=Path, default=None, help="dotenv file with CCL_REC_* settings (default: .env)")
        return sub

    train = add("train", "train a model and write metrics.log and checkpoint.cclm")
    train.add_argument("--resume", type=Path, default=None, help="training checkpoint to continue from (default: none)")

    evaluate_cmd = add("evaluate", "print held-out auc precision@k recall@k f1@k for a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (required)")

    inspect = add("inspect-augmentations", "dump augmented sequences with their hardness for one user")
    inspect.add_argument("--user", type=int, default=None, help="user id (default: first user with two clicks)")
    inspect.add_argument("--n", type=int, default=10, help="samples per polarity (default: 10)")
    inspect.add_argument("--progress", type=float, default=0.0, help="training progress in [0, 1] for the curriculum (default: 0.0)")
    inspect.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (default: freshly initialized model)")

    export = add("export-embeddings", "write query and augmented representations as CSV")
    export.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (required)")
    export.add_argument("--users", type=int, default=2, help="users to sample (default: 2)")
    export.add_argument("--out", type=Path, default=Path("case_study.csv"), help="CSV destination (default: case_study.csv)")

    compare = add("compare-strategies", "train once per augmentation strategy with the same seed")
    compare.add_argument("--out", type=Path, default=None, help="directory for per-strategy runs (default: output.dir)")

    ablate = add("ablate", "train progressive loss ablations over several seeds")
    ablate.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5], help="training seeds (default: 1 2 3 4 5)")
    ablate.add_argument("--out", type=Path, default=None, help="directory for ablation runs (default: output.dir)")

    return parser


def run(argv: Optional[List[str]] = None, configure_logging: bool = True) -> int:
    """Parse ``argv``, run the subcommand and return its exit code."""
    parser = build_parser()
    try:
        args, extras = parser.parse_known_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_OK

    try:
        progress = getattr(args, "progress", 0.0)
        if not 0.0 <= progress <= 1.0:
            raise ConfigError(f"--progress must lie in [0, 1], got {progress}")
        config = load_config(args.config, parse_overrides(extras), args.env_file)
        if configure_logging:
            setup_logging(config.output.log_level)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CclRecError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
