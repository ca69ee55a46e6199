"""
FlowAug - Flow-Based Minority Oversampling
Command-line entry point

Features:
- gen-data: synthetic imbalanced shot-gather dataset (PGM images + manifest)
- train-flow: maximum-likelihood flow training with checkpoint and loss curve
- sample / augment: temperature sampling and latent interpolation
- crossval / sweep: paired cross-validation and augmentation-size sweep
- verify: the invertibility, log-det, gradient and normalization checks
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
import numpy as np

from config import RUN_CONFIG_FILENAME, RunConfig, get_config_class
from engine.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    LayerNotInitializedError,
    LeakageError,
    NonFiniteError,
    NonFiniteGradientError,
    ShapeError,
    SingularWeightError,
)
from engine.rng import SeededRng
from flows.objective import Dequantizer
from services.augmentation_service import InterpolationSpec, get_augmentation_service
from services.dataset_service import LabeledDataset, SyntheticSeismoConfig, get_dataset_service
from services.experiment_service import get_experiment_service
from services.flow_training_service import build_flow_model, build_train_config, get_flow_training_service
from services.verification_service import VerificationService
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.image_io import CLASS_NAMES, load_dataset, save_dataset, write_pgm, write_sheet
from utils.io_utils import ensure_dir, write_csv
from utils.logging_utils import close_run_log, configure_logging

logger = logging.getLogger(__name__)

CHECKPOINT_FILENAME = "flow.ckpt"

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5
EXIT_LEAKAGE = 6
EXIT_VERIFY = 7

EXIT_CODES_HELP = """
\b
Exit codes:
  0  success
  1  unexpected error
  2  usage error (unknown command or flag, missing --seed)
  3  configuration error (bad config file, key or value)
  4  I/O, checkpoint or input-data error
  5  numerical failure (non-finite values, divergence, singular weights)
  6  leakage audit failure
  7  verification failures
"""


def exit_code_for(error: BaseException) -> int:
    """Map an exception to its documented exit code."""
    if isinstance(error, LeakageError):
        return EXIT_LEAKAGE
    if isinstance(error, (ConfigError, ShapeError)):
        return EXIT_CONFIG
    if isinstance(error, (CheckpointError, DataError, OSError)):
        return EXIT_IO
    if isinstance(
        error,
        (NonFiniteError, NonFiniteGradientError, DivergenceError, SingularWeightError, LayerNotInitializedError),
    ):
        return EXIT_NUMERIC
    return EXIT_OTHER


def handle_errors(command):
    """Turn failures into a one-line stderr diagnostic and a distinct exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as e:
            message = " ".join(str(e).split()) or type(e).__name__
            logger.error(f"{command.__name__} failed: {message}")
            click.echo(f"error: {type(e).__name__}: {message}", err=True)
            sys.exit(exit_code_for(e))
        finally:
            close_run_log()

    return wrapper


def open_run(out: str, run_config: RunConfig) -> Path:
    """Create the run directory, attach its JSON log and echo the effective config."""
    preset = get_config_class()
    out_dir = ensure_dir(out)
    configure_logging(preset.LOG_LEVEL, preset.LOG_FORMAT, out_dir=str(out_dir))
    run_config.write(str(out_dir))
    logger.info(f"Run directory {out_dir} (preset {run_config.preset}, seed {run_config.seed})")
    return out_dir


def prepare_run(out: str, config_path: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    run_config = RunConfig.load(config_path, overrides)
    open_run(out, run_config)
    return run_config


def progress_bars() -> bool:
    return bool(get_config_class().PROGRESS_BARS)


def read_dataset(data: Optional[str]) -> Optional[LabeledDataset]:
    return None if data is None else LabeledDataset(*load_dataset(data))


def dataset_overrides(dataset: Optional[LabeledDataset]) -> Dict[str, Any]:
    """Stored images fix the image size recorded in the run config."""
    return {} if dataset is None else {"image_size": int(dataset.images.shape[1])}


def generate_if_missing(dataset: Optional[LabeledDataset], run_config: RunConfig, seed: int) -> LabeledDataset:
    if dataset is not None:
        return dataset
    return get_dataset_service().generate_synthetic_dataset(SyntheticSeismoConfig.from_run_config(run_config, seed))


def load_flow(checkpoint: str):
    """Rebuild a trained flow from a checkpoint and the run_config.env beside it."""
    path = Path(checkpoint)
    config_path = path.parent / RUN_CONFIG_FILENAME
    if not config_path.is_file():
        raise CheckpointError(f"no {RUN_CONFIG_FILENAME} next to checkpoint {path}")
    run_config = RunConfig.load(str(config_path))
    size = run_config.image_size
    model = build_flow_model(run_config, (size, size, 1), SeededRng(run_config.seed).child("model"))
    load_checkpoint(path, model)
    return model, run_config


common_options = [
    click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory for artifacts."),
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key=value run configuration file."),
]


def with_common_options(command):
    for option in reversed(common_options):
        command = option(command)
    return command


seed_option = click.option("--seed", required=True, type=int, help="Master seed (required).")


@click.group(epilog=EXIT_CODES_HELP)
def cli():
    """FlowAug: flow-based latent interpolation for imbalanced image classes."""


@cli.command("gen-data", epilog=EXIT_CODES_HELP)
@with_common_options
@seed_option
@click.option("--n", "n_images", type=int, help="Number of images.")
@click.option("--image-size", type=int, help="Square image side, a power of two.")
@click.option("--ratios", help="Class ratios good,medium,bad summing to 1.")
@handle_errors
def gen_data(out, config_path, seed, n_images, image_size, ratios):
    """Generate a synthetic labeled dataset as PGM images plus manifest.csv."""
    run_config = prepare_run(
        out, config_path, {"seed": seed, "n_images": n_images, "image_size": image_size, "class_ratios": ratios}
    )
    dataset = generate_if_missing(None, run_config, seed)
    save_dataset(out, dataset.images, dataset.labels)
    for label, name in enumerate(CLASS_NAMES):
        members = dataset.images[dataset.labels == label][:32]
        if len(members):
            write_sheet(Path(out) / f"sheet_{name}.pgm", members)
    counts = dict(zip(CLASS_NAMES, dataset.class_counts().tolist()))
    click.echo(f"wrote {len(dataset)} images to {out}: {counts}")


@cli.command("train-flow", epilog=EXIT_CODES_HELP)
@with_common_options
@seed_option
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option(
    "--class", "class_name", type=click.Choice(CLASS_NAMES + ("all",)), help="Train on one class (default: rare class)."
)
@click.option("--epochs", type=int, help="Training epochs.")
@handle_errors
def train_flow(out, config_path, seed, data, class_name, epochs):
    """Train a flow on dataset images and write flow.ckpt and loss_curve.csv."""
    dataset = read_dataset(data)
    run_config = prepare_run(out, config_path, {"seed": seed, "flow_epochs": epochs, **dataset_overrides(dataset)})
    class_name = class_name or run_config.rare_class
    images = dataset.images
    if class_name != "all":
        images = images[dataset.labels == CLASS_NAMES.index(class_name)]
    dequantizer = Dequantizer(run_config.discretization)
    model = build_flow_model(run_config, dataset.image_shape, SeededRng(seed).child("model"))
    service = get_flow_training_service(progress_bars=progress_bars())
    result = service.fit(model, images, build_train_config(run_config, seed), dequantizer)
    save_checkpoint(Path(out) / CHECKPOINT_FILENAME, model)
    service.write_loss_curve(Path(out) / "loss_curve.csv", result)
    bpd = service.evaluate_bits_per_dim(model, images, dequantizer, SeededRng(seed).child("evaluate"))
    click.echo(
        f"trained on {len(images)} '{class_name}' images: final nll {result.final_nll:.4f} nats, {bpd:.4f} bits/dim"
    )


@cli.command("sample", epilog=EXIT_CODES_HELP)
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Trained flow.ckpt.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory for samples.")
@seed_option
@click.option("--n", "count", type=int, default=16, show_default=True, help="Number of samples.")
@click.option("--temperature", type=float, help="Latent temperature (default from the run config).")
@handle_errors
def sample(checkpoint, out, seed, count, temperature):
    """Draw samples from a trained flow as PGM files plus a sample sheet."""
    model, run_config = load_flow(checkpoint)
    changes = {"seed": seed, "temperature": temperature}
    run_config = run_config.updated({k: v for k, v in changes.items() if v is not None})
    out_dir = open_run(out, run_config)
    images = get_augmentation_service().sample(model, count, run_config.temperature, SeededRng(seed).child("sample"))
    images = Dequantizer(run_config.discretization).quantize(images)
    for i, image in enumerate(images):
        write_pgm(out_dir / f"sample_{i:05d}.pgm", image)
    if count:
        write_sheet(out_dir / "samples_sheet.pgm", images)
    click.echo(f"wrote {count} samples at temperature {run_config.temperature} to {out_dir}")


@cli.command("augment", epilog=EXIT_CODES_HELP)
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False), help="Trained flow.ckpt.")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False), help="Dataset directory.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory for augmentations.")
@seed_option
@click.option("--count", type=int, help="Synthetic images to generate (default augment_count).")
@click.option("--class", "class_name", type=click.Choice(CLASS_NAMES), help="Source class (default: rare class).")
@click.option("--mode", type=click.Choice(("linear", "spherical")), help="Latent blend.")
@click.option("--strip-steps", type=int, default=8, show_default=True, help="Positions in the interpolation strip.")
@handle_errors
def augment(checkpoint, data, out, seed, count, class_name, mode, strip_steps):
    """Interpolate same-class latents and write images with provenance."""
    model, run_config = load_flow(checkpoint)
    changes = {"seed": seed, "augment_count": count, "interp_mode": mode}
    run_config = run_config.updated({k: v for k, v in changes.items() if v is not None})
    out_dir = open_run(out, run_config)

    images, labels = load_dataset(data)
    label = CLASS_NAMES.index(class_name or run_config.rare_class)
    positions = np.flatnonzero(labels == label)
    service = get_augmentation_service()
    augmentations = service.generate_augmentations(
        model,
        images[positions],
        run_config.augment_count,
        InterpolationSpec.from_run_config(run_config),
        SeededRng(seed).child("augment"),
        source_ids=positions,
    )
    service.save(out_dir, augmentations)
    if len(augmentations):
        write_sheet(out_dir / "augment_sheet.pgm", augmentations.images[:64])
        first = augmentations.provenance[0]
        endpoints = images[positions[first.local_a]], images[positions[first.local_b]]
        strip = service.interpolation_strip(model, *endpoints, steps=strip_steps, mode=run_config.interp_mode)
        write_sheet(out_dir / "interpolation_strip.pgm", strip, columns=strip_steps)
        report = service.plurality_report(augmentations.images, images[positions], augmentations.provenance)
        rows = [
            {
                "index": i,
                "nearest_source": float(report["nearest_source"][i]),
                "to_a": float(report["to_a"][i]),
                "to_b": float(report["to_b"][i]),
            }
            for i in range(len(augmentations))
        ]
        write_csv(out_dir / "plurality.csv", rows, ("index", "nearest_source", "to_a", "to_b"))
        click.echo(f"exact copies of a source: {report['exact_copy_fraction']:.3f}")
    click.echo(f"wrote {len(augmentations)} augmentations of class '{CLASS_NAMES[label]}' to {out_dir}")


@cli.command("crossval", epilog=EXIT_CODES_HELP)
@with_common_options
@seed_option
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Dataset directory (default: generate).")
@click.option("--k", "folds", type=int, help="Number of folds.")
@click.option("--augment", "augment_count", type=int, help="Synthetic rare-class images per fold.")
@handle_errors
def crossval(out, config_path, seed, data, folds, augment_count):
    """Paired stratified k-fold comparison of baseline and augmented training."""
    dataset = read_dataset(data)
    overrides = {"seed": seed, "folds": folds, "augment_count": augment_count, **dataset_overrides(dataset)}
    run_config = prepare_run(out, config_path, overrides)
    dataset = generate_if_missing(dataset, run_config, seed)
    result = get_experiment_service(progress_bars=progress_bars()).cross_validate(
        dataset, run_config, seed, out_dir=out
    )
    comparison = result.rare_f1
    click.echo(
        f"{run_config.rare_class} F1 delta: mean {comparison.mean:+.4f}, median {comparison.median:+.4f}, "
        f"sign test p={comparison.p_value:.4f}; macro F1 delta mean {result.macro_f1.mean:+.4f}"
    )


@cli.command("sweep", epilog=EXIT_CODES_HELP)
@with_common_options
@seed_option
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Dataset directory (default: generate).")
@click.option("--sizes", help="Comma-separated augmentation sizes.")
@click.option("--runs", type=int, help="Classifier runs per size.")
@handle_errors
def sweep(out, config_path, seed, data, sizes, runs):
    """F1 against augmentation size, with a recommended size."""
    dataset = read_dataset(data)
    overrides = {"seed": seed, "sweep_sizes": sizes, "sweep_runs": runs, **dataset_overrides(dataset)}
    run_config = prepare_run(out, config_path, overrides)
    dataset = generate_if_missing(dataset, run_config, seed)
    result = get_experiment_service(progress_bars=progress_bars()).augmentation_size_sweep(
        dataset, run_config, seed, out_dir=out
    )
    click.echo(f"recommended augmentation size: {result.recommended}")


@cli.command("verify", epilog=EXIT_CODES_HELP)
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the randomized checks.")
@click.option("--trials", type=int, default=100, show_default=True, help="Round-trips per layer kind.")
@handle_errors
def verify(seed, trials):
    """Run the property-check suite; exit 7 if any check fails."""
    preset = get_config_class()
    configure_logging(preset.LOG_LEVEL, preset.LOG_FORMAT)
    report = VerificationService(seed=seed, trials=trials).run()
    for record in report["checks"]:
        click.echo(f"{'PASS' if record['passed'] else 'FAIL'} {record['name']}: {record['detail']}")
    click.echo(f"{report['passed']}/{report['total']} checks passed")
    if not report["success"]:
        sys.exit(EXIT_VERIFY)


if __name__ == '__main__':
    cli()
