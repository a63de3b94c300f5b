"""
Command-line interface for guidederain.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, check_mode, load_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, resolve_config
from .data import (
    DatasetError,
    ImageIOError,
    expand_inputs,
    intermediate_paths,
    load_png,
    match_image_dirs,
    save_png,
)
from .exporter import AblationTableExporter, get_report_exporter
from .metrics import image_metrics
from .models import AblationResult, MetricReport
from .network import TOPOLOGIES, AblationMode, ContractError, DerainNetwork
from .optim import OptimizerError
from .tensor import InvalidArgumentError
from .trainer import Trainer, clamp_unit, prepare_pairs, split_holdout


DOMAIN_ERRORS = (
    ConfigError,
    DatasetError,
    ImageIOError,
    CheckpointError,
    InvalidArgumentError,
    ContractError,
    OptimizerError,
)


# Configure logging
def setup_logging(verbose: bool = False):
    """Configure logging for the application."""
    level = logging.DEBUG if verbose else logging.INFO
    format_str = "%(asctime)s - %(levelname)s - %(message)s"
    logging.basicConfig(
        level=level,
        format=format_str,
        datefmt="%Y-%m-%d %H:%M:%S"
    )


def resolve_run_config(args) -> RunConfig:
    """
    Build the RunConfig for a command: defaults, then --config, then flags.

    Raises:
        ConfigError: If the file or a value is invalid
        FileNotFoundError: If --config names a missing file
    """
    logger = logging.getLogger(__name__)
    file_values: Dict[str, Any] = {}
    if getattr(args, "config", None):
        logger.info(f"Loading configuration from {args.config}")
        file_values = load_config(args.config)
    return resolve_config(file_values, vars(args))


def prepare_output_dir(path: str) -> Path:
    """
    Create the output directory and make sure it is writable.

    Raises:
        ConfigError: If the directory cannot be created or written
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {out}: {e}")
    if not os.access(out, os.W_OK):
        raise ConfigError(f"Output directory is not writable: {out}")
    return out


def _load_config_or_exit(args) -> RunConfig:
    logger = logging.getLogger(__name__)
    try:
        return resolve_run_config(args)
    except FileNotFoundError:
        logger.error(f"Configuration file not found: {args.config}")
        logger.error("See config.example.yaml for reference.")
        sys.exit(1)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        sys.exit(1)


def handle_train_command(args):
    """Handle the train subcommand."""
    logger = logging.getLogger(__name__)

    try:
        config = _load_config_or_exit(args)
        logger.info(f"  Mode: {config.ablation_mode().label}")
        logger.info(f"  Seed: {config.seed}")

        # Step 1: everything that can fail before training
        out = prepare_output_dir(config.out)
        pairs = prepare_pairs(config)
        train_pairs, held_out = split_holdout(pairs, config.holdout_fraction, config.seed)
        logger.info(f"  {len(train_pairs)} training pairs, {len(held_out)} held out")

        trainer = Trainer(config)
        if config.checkpoint:
            logger.info(f"Loading checkpoint {config.checkpoint}")
            trainer.resume(load_checkpoint(config.checkpoint))
        trainer.validate(train_pairs)
        dump_config(config, out / "config.yaml")

        # Step 2: train
        summary = trainer.fit(train_pairs, str(out))
        print(summary)

        # Step 3: held-out quality
        if held_out:
            report = trainer.evaluate(held_out)
            print(report)
        logger.info("Done!")

    except DOMAIN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        logger.warning("\nInterrupted by user")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=args.verbose)
        sys.exit(1)


def requested_mode(args, file_values: Dict[str, Any], saved: AblationMode) -> Optional[AblationMode]:
    """
    The ablation mode the user asked for at inference, if any.

    Unspecified parts fall back to the checkpoint's own mode.
    """
    mode = args.mode or file_values.get("mode")
    dilated = args.dilated_streams if args.dilated_streams is not None else file_values.get("dilated_streams")
    if mode is None and dilated is None:
        return None
    return AblationMode(
        topology=mode or saved.topology,
        no_dilated_streams=(not dilated) if dilated is not None else saved.no_dilated_streams,
        no_physical_loss=saved.no_physical_loss,
    )


def derain_images(
    network: DerainNetwork,
    params,
    inputs: List[Path],
    out: Path,
    dump_intermediates: bool = False,
) -> List[Path]:
    """
    Derain every input image and write the results to out.

    Returns:
        Paths of the written final images
    """
    logger = logging.getLogger(__name__)
    written = []
    for path in inputs:
        o = load_png(path)
        outputs = network.infer(o, params)
        target = out / f"{path.stem}.png"
        save_png(clamp_unit(outputs.final), target)
        if dump_intermediates:
            rain_path, free_path = intermediate_paths(target)
            if outputs.rain_hat is not None:
                save_png(clamp_unit(outputs.rain_hat), rain_path)
            if outputs.free_hat is not None:
                save_png(clamp_unit(outputs.free_hat), free_path)
        logger.info(f"  {path} -> {target}")
        written.append(target)
    return written


def handle_derain_command(args):
    """Handle the derain subcommand."""
    logger = logging.getLogger(__name__)

    try:
        file_values: Dict[str, Any] = {}
        if args.config:
            try:
                file_values = load_config(args.config)
            except FileNotFoundError:
                logger.error(f"Configuration file not found: {args.config}")
                sys.exit(1)
        config = resolve_config(file_values, vars(args))
        if not config.checkpoint:
            logger.error("derain needs --checkpoint <file>")
            sys.exit(1)

        logger.info(f"Loading checkpoint {config.checkpoint}")
        checkpoint = load_checkpoint(config.checkpoint)
        check_mode(checkpoint, requested_mode(args, file_values, checkpoint.config.ablation))
        network = DerainNetwork(checkpoint.config)
        logger.info(f"  Model: {network.mode.label} ({checkpoint.params.count()} parameters)")

        inputs = expand_inputs(args.inputs)
        out = prepare_output_dir(config.out)
        dump_config(config, out / "config.yaml")

        logger.info(f"Deraining {len(inputs)} images into {out}")
        written = derain_images(network, checkpoint.params, inputs, out, config.dump_intermediates)

        logger.info("=" * 60)
        logger.info("Summary:")
        logger.info(f"  Images derained: {len(written)}")
        logger.info(f"  Output written to: {out}")
        logger.info("=" * 60)

    except DOMAIN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        logger.warning("\nInterrupted by user")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=args.verbose)
        sys.exit(1)


def evaluate_dirs(derained_dir: str, truth_dir: str, rainy_dir: Optional[str] = None) -> MetricReport:
    """
    Per-image PSNR/SSIM of derained outputs against ground truth.

    With a rainy directory, images that have R~ and B~ dumps also get the
    mean physical residual |B~ + R~ - O|.
    """
    logger = logging.getLogger(__name__)
    report = MetricReport()
    for entry in match_image_dirs(derained_dir, truth_dir):
        derained = load_png(entry.rain_path)
        truth = load_png(entry.clean_path)
        if derained.shape != truth.shape:
            raise DatasetError(
                f"Size mismatch for {entry.name}: derained {derained.shape[2:]} vs ground truth {truth.shape[2:]}"
            )
        residual = None
        rain_path, free_path = intermediate_paths(entry.rain_path)
        rainy_path = Path(rainy_dir) / entry.name if rainy_dir else None
        if rainy_path is not None and rain_path.exists() and free_path.exists():
            if rainy_path.exists():
                o = load_png(rainy_path).data
                residual = float(np.mean(np.abs(load_png(free_path).data + load_png(rain_path).data - o)))
            else:
                logger.warning(f"No rainy input {rainy_path}; skipping physical residual")
        report.rows.append(image_metrics(Path(entry.name).stem, derained, truth, residual))
    return report


def handle_eval_command(args):
    """Handle the eval subcommand."""
    logger = logging.getLogger(__name__)

    try:
        exporter = get_report_exporter(args.format)
        logger.info(f"Evaluating {args.derained} against {args.ground_truth}")
        report = evaluate_dirs(args.derained, args.ground_truth, args.rainy)
        print(exporter.render(report), end="")

        if args.out:
            out = prepare_output_dir(args.out)
            exporter.export(report, str(out / f"report.{args.format}"))
            config = _load_config_or_exit(args)
            dump_config(config, out / "config.yaml")
        logger.info(f"\n{report}")

    except DOMAIN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        sys.exit(1)
    except ValueError as e:
        logger.error(f"{e}")
        sys.exit(1)
    except KeyboardInterrupt:
        logger.warning("\nInterrupted by user")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=args.verbose)
        sys.exit(1)


MODEL_VARIANTS = [(multiscale, topology) for multiscale in (True, False) for topology in TOPOLOGIES]
COMPONENT_VARIANTS = [
    ("R1", {"dilated_streams": False}),
    ("R2", {"physical_loss": False}),
    ("R3", {}),
]


def run_ablation(config: RunConfig, out: Path):
    """
    Train and evaluate every ablation configuration on the same data.

    All runs share the seed, data order and budget of ``config``. The
    topology table covers M1..M4 with and without multi-scale blocks; the
    component table covers R1..R3 on the full M4 model.

    Returns:
        (model_results, component_results)
    """
    logger = logging.getLogger(__name__)
    pairs = prepare_pairs(config)
    train_pairs, held_out = split_holdout(pairs, config.holdout_fraction, config.seed)
    if not held_out:
        logger.warning("No held-out pairs; evaluating ablations on the training pairs")
        held_out = train_pairs

    def run(label: str, run_config: RunConfig, run_dir: str, multiscale: bool) -> AblationResult:
        logger.info("=" * 60)
        logger.info(f"Ablation run {label} ({run_dir})")
        trainer = Trainer(run_config)
        summary = trainer.fit(train_pairs, str(out / "runs" / run_dir))
        report = trainer.evaluate(held_out)
        logger.info(f"  {label}: PSNR {report.mean_psnr:.4f} SSIM {report.mean_ssim:.4f} loss {summary.final_total:.6f}")
        return AblationResult(
            label=label,
            multiscale=multiscale,
            psnr=report.mean_psnr,
            ssim=report.mean_ssim,
            final_loss=summary.final_total,
            parameter_count=summary.parameter_count,
            train_l1=trainer.training_error(train_pairs),
        )

    base = dataclasses.replace(config, dilated_streams=True, physical_loss=True, checkpoint=None)
    model_results = []
    for multiscale, topology in MODEL_VARIANTS:
        label = topology.upper()
        run_config = dataclasses.replace(base, mode=topology, multiscale=multiscale)
        run_dir = f"{label}_{'W' if multiscale else 'WO'}"
        model_results.append(run(label, run_config, run_dir, multiscale))

    component_results = []
    for label, overrides in COMPONENT_VARIANTS:
        run_config = dataclasses.replace(base, mode="m4", multiscale=True, **overrides)
        component_results.append(run(label, run_config, label, True))
    return model_results, component_results


def handle_ablate_command(args):
    """Handle the ablate subcommand."""
    logger = logging.getLogger(__name__)

    try:
        config = _load_config_or_exit(args)
        if not config.dataset and not config.synthetic:
            logger.info("No dataset given; using the synthetic toy set")
            config = dataclasses.replace(config, synthetic=True)
        out = prepare_output_dir(config.out)
        dump_config(config, out / "config.yaml")

        model_results, component_results = run_ablation(config, out)

        exporter = AblationTableExporter()
        exporter.export(model_results, component_results, str(out))
        print(exporter.render(model_results, component_results))
        logger.info("Desk-scale numbers; not comparable to full-scale training.")
        logger.info("Done!")

    except DOMAIN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        sys.exit(1)
    except KeyboardInterrupt:
        logger.warning("\nInterrupted by user")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=args.verbose)
        sys.exit(1)


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags shared by every subcommand. Unset flags stay None so config files apply."""
    parser.add_argument(
        "-c", "--config",
        help="Path to a flat configuration file: YAML or key = value lines (see config.example.yaml)"
    )
    parser.add_argument("--seed", type=int, help="Random seed (default: 0)")
    parser.add_argument(
        "--mode",
        choices=list(TOPOLOGIES),
        help="Network topology: m1 streaks only, m2 rain-free only, m3 free->guide, m4 concat->guide (default)"
    )
    parser.add_argument(
        "--no-multiscale", dest="multiscale", action="store_const", const=False,
        help="Replace multi-scale residual blocks with plain residual blocks"
    )
    parser.add_argument(
        "--no-dilated-streams", dest="dilated_streams", action="store_const", const=False,
        help="Use a single dilation-1 stream in the guide network"
    )
    parser.add_argument(
        "--no-physical-loss", dest="physical_loss", action="store_const", const=False,
        help="Train with the physical-model constraint weighted by 0"
    )
    parser.add_argument("--out", help="Output directory (default: runs/latest)")
    parser.add_argument("--checkpoint", help="Checkpoint file to load")
    parser.add_argument(
        "-v", "--verbose",
        action="store_true",
        help="Enable verbose logging"
    )


def _add_training_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", help="Dataset root containing rain/ and norain/ PNG folders")
    parser.add_argument(
        "--synthetic", action="store_const", const=True,
        help="Train on a seeded synthetic rain set instead of a dataset"
    )
    parser.add_argument("--epochs", type=int, help="Number of epochs (default: 200)")
    parser.add_argument("--batch", type=int, help="Batch size (default: 8)")
    parser.add_argument("--crop", type=int, help="Square crop size (default: 32)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidederain",
        description=(
            "guidederain - Single-image deraining with a physical-model guided network."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )

    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}"
    )

    subparsers = parser.add_subparsers(
        dest="command",
        help="Command to execute"
    )

    # ===== TRAIN COMMAND =====
    train_parser = subparsers.add_parser(
        "train",
        help="Train a deraining model",
        description="Train under one ablation mode and write a checkpoint and loss log",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  guidederain train --synthetic --epochs 1 --seed 7 --out runs/smoke
  guidederain train --dataset data/Rain100L --mode m4 --out runs/rain100l -v
        """
    )
    _add_common_arguments(train_parser)
    _add_training_arguments(train_parser)

    # ===== DERAIN COMMAND =====
    derain_parser = subparsers.add_parser(
        "derain",
        help="Derain images with a trained checkpoint",
        description="Run a checkpoint on PNG images or directories of PNGs",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  guidederain derain --checkpoint runs/smoke/model.ckpt --out derained/ photos/
  guidederain derain --checkpoint model.ckpt --out derained/ --dump-intermediates img.png
        """
    )
    _add_common_arguments(derain_parser)
    derain_parser.add_argument(
        "--dump-intermediates", dest="dump_intermediates", action="store_const", const=True,
        help="Also write the streak (<name>_rain.png) and rain-free (<name>_free.png) estimates"
    )
    derain_parser.add_argument("inputs", nargs="+", help="PNG files or directories")

    # ===== EVAL COMMAND =====
    eval_parser = subparsers.add_parser(
        "eval",
        help="Compute PSNR/SSIM of derained images",
        description="Compare derained images to ground truth by filename",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  guidederain eval --derained derained/ --ground-truth data/Rain100L/norain
  guidederain eval --derained derained/ --ground-truth gt/ --rainy data/rain --format json --out report/
        """
    )
    _add_common_arguments(eval_parser)
    eval_parser.add_argument("--derained", required=True, help="Directory of derained PNGs")
    eval_parser.add_argument("--ground-truth", dest="ground_truth", required=True, help="Directory of clean PNGs")
    eval_parser.add_argument("--rainy", help="Directory of rainy inputs, for the physical residual")
    eval_parser.add_argument(
        "-f", "--format",
        choices=["csv", "json"],
        default="csv",
        help="Report format (default: csv)"
    )

    # ===== ABLATE COMMAND =====
    ablate_parser = subparsers.add_parser(
        "ablate",
        help="Run the model and component ablations",
        description="Train M1-M4 with and without multi-scale blocks plus R1-R3 and tabulate held-out quality",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  guidederain ablate --synthetic --epochs 20 --out runs/ablation
        """
    )
    _add_common_arguments(ablate_parser)
    _add_training_arguments(ablate_parser)

    return parser


def main(argv: Optional[List[str]] = None):
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        sys.exit(0)

    # Setup logging
    setup_logging(verbose=args.verbose)
    logger = logging.getLogger(__name__)

    # Print banner
    logger.info("=" * 60)
    logger.info(f"guidederain v{__version__}")
    logger.info("=" * 60)

    # Route to appropriate command handler
    if args.command == "train":
        handle_train_command(args)
    elif args.command == "derain":
        handle_derain_command(args)
    elif args.command == "eval":
        handle_eval_command(args)
    elif args.command == "ablate":
        handle_ablate_command(args)
    else:
        parser.print_help()
        sys.exit(1)


if __name__ == "__main__":
    main()
