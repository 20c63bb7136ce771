"""Command-line interface: train, profile, trace and analyze."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
import sys
from typing import NoReturn

import numpy as np

from . import __version__
from .analysis import (
    AssemblyTrace,
    load_stats,
    transition_matrix,
    write_loads_csv,
    write_transitions_csv,
)
from .checkpoint import load_model
from .config import RunConfig, load_run_config
from .corpus import corpus_load, read_corpus
from .errors import ConfigurationError, ContractError, MomError
from .model import MOM_PRESETS, ChunkPlan, MomModel, lm_forward, parse_chunk_plan, parse_mom_config
from .profiler import (
    DIMS_PRESETS,
    PRESET_PLANS,
    Assumption,
    estimate_flops,
    format_csv,
    format_table,
    parse_dims,
    profile,
)
from .tensor import Rng, default_dtype, no_grad
from .training import decompose_vanilla, train_phase

logger = logging.getLogger("momlm")

EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class UsageParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def main(args: None | list[str] = None) -> None:
    """Run the CLI."""
    parser = UsageParser(
        prog="momlm", description="Mixture-of-Modules language models"
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )
    # print named configurations and exit
    parser.add_argument(
        "--list-presets",
        "-lp",
        action=ListPresets,
        nargs=0,
        help="Print MoM and dimension presets and exit",
    )

    subparsers = parser.add_subparsers(
        title="Commands", metavar="", dest="subcommand", required=True
    )

    parser_train = subparsers.add_parser("train", help="Train one phase")
    add_shared_args(parser_train)
    parser_train.add_argument(
        "--config", "-c", type=Path, required=True, help="Run configuration file"
    )
    parser_train.add_argument(
        "--phase", type=int, choices=[1, 2], default=1, help="Training phase (default: 1)"
    )
    parser_train.add_argument(
        "--init-from", type=Path, help="Phase 1 checkpoint to decompose (phase 2)"
    )
    parser_train.add_argument(
        "--mom-from-scratch",
        action="store_true",
        help="Train the configured MoM plan from random weights in phase 1",
    )

    parser_profile = subparsers.add_parser("profile", help="Estimate costs")
    add_shared_args(parser_profile)
    parser_profile.add_argument(
        "--dims",
        default="desk",
        help=f"Preset {sorted(DIMS_PRESETS)} or d_model=..,n_heads=..,... (default: desk)",
    )
    parser_profile.add_argument("--plan", help="Chunk plan (default: the preset's plan)")
    parser_profile.add_argument(
        "--mom",
        action="append",
        help="MoM config such as K3H1S or a preset name; repeatable",
    )
    parser_profile.add_argument("--baseline", help="Config to compare against")
    parser_profile.add_argument(
        "--seq-len", type=int, default=256, help="Tokens per sequence (default: 256)"
    )
    parser_profile.add_argument(
        "--assume",
        default="no_skip",
        help="no_skip, all_skip or expected:<p> (default: no_skip)",
    )
    parser_profile.add_argument(
        "--assume-from",
        type=Path,
        help="Trace CSV whose mean skip rate sets an expected-cost assumption",
    )
    parser_profile.add_argument(
        "--router", choices=["gru", "mlp"], default="gru", help="Router kind"
    )
    parser_profile.add_argument("--csv", type=Path, help="Also write the report as CSV")

    parser_trace = subparsers.add_parser("trace", help="Record routing decisions")
    add_shared_args(parser_trace)
    parser_trace.add_argument("--ckpt", type=Path, required=True, help="Model checkpoint")
    parser_trace.add_argument("--input", type=Path, required=True, help="Text to route")
    parser_trace.add_argument("--out", type=Path, required=True, help="Trace CSV to write")

    parser_analyze = subparsers.add_parser("analyze", help="Summarise a trace")
    add_shared_args(parser_analyze)
    parser_analyze.add_argument("--trace", type=Path, required=True, help="Trace CSV")
    parser_analyze.add_argument(
        "--out-dir", type=Path, help="Output directory (default: next to the trace)"
    )

    parsed_args = parser.parse_args(args)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * parsed_args.verbose),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if parsed_args.subcommand == "train":
        if parsed_args.phase == 2 and parsed_args.init_from is None:
            parser_train.error("--phase 2 requires --init-from")
        if parsed_args.phase == 1 and parsed_args.init_from is not None:
            parser_train.error("--init-from is only valid with --phase 2")
        if parsed_args.phase == 2 and parsed_args.mom_from_scratch:
            parser_train.error("--mom-from-scratch is only valid with --phase 1")

    commands = {
        "train": run_train,
        "profile": run_profile,
        "trace": run_trace,
        "analyze": run_analyze,
    }
    try:
        commands[parsed_args.subcommand](parsed_args)
    except ConfigurationError as exc:
        fail(EXIT_CONFIG, exc)
    except MomError as exc:
        fail(EXIT_RUNTIME, exc)


def fail(code: int, exc: Exception) -> NoReturn:
    print(f"momlm: error: {exc}", file=sys.stderr)
    sys.exit(code)


class ListPresets(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):  # type: ignore[no-untyped-def]
        for name, config in MOM_PRESETS.items():
            print(f"{name} = {config}")
        for name in DIMS_PRESETS:
            print(f"{name} plan {PRESET_PLANS[name]}")
        sys.exit(0)


def add_shared_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--verbose",
        "-v",
        action="count",
        default=0,
        help="Log progress (-v) or debug detail (-vv)",
    )


def run_train(args: argparse.Namespace) -> None:
    config = load_run_config(args.config)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = config.out_dir / "metrics.log"
    phase = args.phase
    with default_dtype(config.dtype):
        corpus = corpus_load(config.corpus, config.seq_len, config.val_fraction, config.seed)
        if phase == 1:
            model = initial_model(config, args.mom_from_scratch)
            metrics_path.unlink(missing_ok=True)
        else:
            vanilla, _ = load_model(args.init_from)
            model = decompose_vanilla(
                vanilla,
                config.chunk_plan(),
                config.mom_config(),
                seed=config.seed,
                router_kind=config.router,
            )
        train = config.train_config(phase)
        metrics = train_phase(
            model,
            corpus.train_sampler(train.batch_size, Rng(config.seed).spawn(phase).seed),
            train,
            phase,
            val_batches=corpus.validation_batches(train.batch_size, train.eval_batches),
            metrics_path=metrics_path,
            checkpoint_dir=config.out_dir,
            tie_modules=config.tie_modules,
        )
    val_losses = [m.val_loss for m in metrics if m.val_loss is not None]
    if val_losses:
        print(f"phase {phase} final val_loss={val_losses[-1]:.6f}")
    print(f"checkpoint {config.out_dir / f'phase{phase}_final.ckpt'}")


def initial_model(config: RunConfig, mom_from_scratch: bool) -> MomModel:
    if mom_from_scratch:
        return MomModel.build(
            config.model_dims(),
            config.chunk_plan(),
            config.mom_config(),
            seed=config.seed,
            router_kind=config.router,
        )
    return MomModel.build(
        config.model_dims(), ChunkPlan.vanilla(config.layers), seed=config.seed
    )


def run_profile(args: argparse.Namespace) -> None:
    dims = parse_dims(args.dims)
    if args.plan is None and args.dims not in PRESET_PLANS:
        raise ConfigurationError("--plan is required with custom --dims")
    plan = parse_chunk_plan(args.plan or PRESET_PLANS[args.dims])
    moms = [parse_mom_config(text) for text in args.mom or ["K2H2S"]]
    assume = Assumption.parse(args.assume)
    if args.assume_from is not None:
        loads = load_stats(AssemblyTrace.from_csv(args.assume_from))
        assume = Assumption.from_skip_rates(load.skip_rate for load in loads.values())
    reports = profile(dims, plan, moms, args.seq_len, assume, router=args.router)
    baseline = None
    if args.baseline:
        baseline = estimate_flops(
            dims, plan, parse_mom_config(args.baseline), args.seq_len, assume, router=args.router
        )
    print(
        f"dims {args.dims} plan {plan} seq_len {args.seq_len} assume {assume.render()}"
        + (f" baseline {baseline.label}" if baseline else "")
    )
    print(format_table(reports, baseline))
    if args.csv:
        args.csv.write_text(format_csv(reports), encoding="utf8")


def run_trace(args: argparse.Namespace) -> None:
    model, _ = load_model(args.ckpt)
    ids = read_corpus(args.input)
    vocab = model.config.vocab_size
    if int(ids.max()) >= vocab:
        raise ContractError(f"input byte {int(ids.max())} overflows vocab of {vocab}")
    length = model.config.max_len
    trace = AssemblyTrace()
    with no_grad():
        for seq_id, start in enumerate(range(0, len(ids), length)):
            _, recorded = lm_forward(model, ids[start : start + length], seq_id=seq_id)
            trace.extend(recorded)
    trace.to_csv(args.out)
    print(f"wrote {len(trace)} records for {len(ids)} tokens to {args.out}")


def run_analyze(args: argparse.Namespace) -> None:
    trace = AssemblyTrace.from_csv(args.trace)
    loads = load_stats(trace)
    out_dir = args.out_dir or args.trace.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    matrices = [transition_matrix(trace, kind) for kind in loads]
    write_transitions_csv(matrices, out_dir / "transitions.csv")
    write_loads_csv(loads.values(), out_dir / "loads.csv")
    for kind, load in loads.items():
        modules = load.overall[:-1]
        top = int(np.argmax(modules))
        print(
            f"{kind.value}: skip_rate={load.skip_rate:.4f} "
            f"top_module={top} freq={float(modules[top]):.4f}"
        )


if __name__ == "__main__":
    main()
