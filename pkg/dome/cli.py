import argparse
import os
import sys
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional

from dbt.events import AdapterLogger

from dome.checkpoint import write_checkpoint
from dome.config import (
    Lemma1Config,
    Lemma2Config,
    SecAggCheckConfig,
    SketchCheckConfig,
    TrainingConfig,
    load_config,
)
from dome.exceptions import BudgetViolationError, DomeConfigError, DomeError, ToleranceFailure
from dome.experiments import (
    ExperimentReport,
    lemma1_experiment,
    lemma2_experiment,
    secagg_experiment,
    sketch_tracking_experiment,
)
from dome.federation import run_training
from dome.linalg import RngStream, Stream
from dome.metrics import (
    read_json,
    read_metrics_csv,
    training_summary,
    write_json,
    write_metrics_csv,
    write_privacy_report,
)

logger = AdapterLogger("Dome")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _out_path(out: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(out, path)


@contextmanager
def _writing_outputs(out: str) -> Iterator[None]:
    try:
        yield
    except OSError as exc:
        raise DomeError(f"Cannot write outputs under {out}: {exc}") from exc


def train(args: argparse.Namespace) -> int:
    config = load_config(args.config, TrainingConfig, seed=args.seed)
    with _writing_outputs(args.out):
        os.makedirs(args.out, exist_ok=True)
        trace_path = _out_path(args.out, config.trace_path) if config.trace_path else None
        result = run_training(config, trace_path=trace_path)

        write_metrics_csv(result.records, _out_path(args.out, config.metrics_path))
        write_privacy_report(result.privacy, _out_path(args.out, config.privacy_report_path))
        if config.checkpoint_path:
            write_checkpoint(
                _out_path(args.out, config.checkpoint_path), result.theta, result.server.sketch, result.server.adam
            )
    logger.info(
        f"Trained {len(result.records)} rounds: loss {result.initial_loss:.6g} -> {result.final_loss:.6g}, "
        f"epsilon'={result.privacy.epsilon_prime:.6g} of {result.privacy.epsilon:g}"
    )
    return EXIT_OK


def _finish(report: ExperimentReport, out: str, report_path: str) -> int:
    with _writing_outputs(out):
        write_json(report.to_dict(), _out_path(out, report_path))
    for check in report.checks:
        verdict = "pass" if check.passed else "FAIL"
        logger.info(f"{report.name}: {check.quantity}={check.measured:.6g} ({verdict})")
    report.raise_for_failures()
    return EXIT_OK


def check_lemma1(args: argparse.Namespace) -> int:
    config = load_config(args.config, Lemma1Config, seed=args.seed)
    report = lemma1_experiment(
        config.d,
        config.k,
        config.sigma,
        config.trials,
        RngStream(config.seed, Stream.EXPERIMENT),
        batch_trials=config.batch_trials,
        rel_tol=config.rel_tol,
        ratio_tol=config.ratio_tol,
    )
    return _finish(report, args.out, config.report_path)


def check_lemma2(args: argparse.Namespace) -> int:
    config = load_config(args.config, Lemma2Config, seed=args.seed)
    report = lemma2_experiment(
        config.d,
        config.k,
        config.v,
        config.trials,
        RngStream(config.seed, Stream.EXPERIMENT),
        batch_trials=config.batch_trials,
        rel_tol=config.rel_tol,
        abs_tol=config.abs_tol,
    )
    return _finish(report, args.out, config.report_path)


def check_secagg(args: argparse.Namespace) -> int:
    config = load_config(args.config, SecAggCheckConfig, seed=args.seed)
    report = secagg_experiment(
        config.batch_sizes,
        config.dims,
        config.rounds,
        config.noise_trials,
        config.noise_variance,
        config.clip,
        RngStream(config.seed, Stream.EXPERIMENT),
        scale_bits=config.scale_bits,
        modulus_bits=config.modulus_bits,
        variance_tol=config.variance_tol,
    )
    return _finish(report, args.out, config.report_path)


def check_sketch(args: argparse.Namespace) -> int:
    config = load_config(args.config, SketchCheckConfig, seed=args.seed)
    report = sketch_tracking_experiment(
        config.d,
        config.k,
        config.true_rank,
        config.spectrum,
        config.steps,
        config.q,
        RngStream(config.seed, Stream.EXPERIMENT),
        angle_tol=config.angle_tol,
        orthonormal_tol=config.orthonormal_tol,
        invariant_steps=config.invariant_steps,
    )
    return _finish(report, args.out, config.report_path)


def report(args: argparse.Namespace) -> int:
    """Summarizes the outputs of a finished `train` run and re-checks its privacy budget."""
    config = load_config(args.config, TrainingConfig, seed=args.seed)
    metrics_path = _out_path(args.out, config.metrics_path)
    privacy_path = _out_path(args.out, config.privacy_report_path)
    try:
        table = read_metrics_csv(metrics_path)
        privacy = read_json(privacy_path)
    except (OSError, ValueError) as exc:
        raise DomeConfigError(f"Cannot read the outputs of a training run under {args.out}: {exc}") from exc

    summary = training_summary(table, privacy)
    summary.print_table(max_column_width=40, output=sys.stdout)
    if privacy["private"] and privacy["epsilon_prime"] > privacy["epsilon"]:
        raise BudgetViolationError(
            f"Recorded epsilon'={privacy['epsilon_prime']} exceeds the budget epsilon={privacy['epsilon']}"
        )
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": train,
    "check-lemma1": check_lemma1,
    "check-lemma2": check_lemma2,
    "check-secagg": check_secagg,
    "check-sketch": check_sketch,
    "report": report,
}


def _seed(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} is not an unsigned 64-bit integer")
    return seed


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="dome", description="Differentially private federated Adam with sketching.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        sub = subparsers.add_parser(name, help=(command.__doc__ or "").strip() or None)
        sub.add_argument("--config", required=True, help="YAML config file")
        sub.add_argument("--seed", type=_seed, default=None, help="overrides the seed in the config")
        sub.add_argument("--out", default=".", help="directory for CSV and JSON outputs")
    return parser.parse_args(argv)


def run_cli(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    try:
        return COMMANDS[args.command](args)
    except DomeConfigError as exc:
        logger.error(f"Config error: {exc}")
        return EXIT_CONFIG
    except (ToleranceFailure, BudgetViolationError) as exc:
        logger.error(str(exc))
        return EXIT_FAILURE
    except DomeError as exc:
        logger.exception(f"{args.command} failed: {exc}")
        return EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())
