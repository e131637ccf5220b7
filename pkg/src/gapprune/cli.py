"""Command-line entry point: ``gapprune <command> ...``.

Every command that consumes randomness requires ``--seed``. Checkpoints
remember the dataset they were trained on, so later stages reload the same
data unless dataset flags override it.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import container
from .attack import adversarial_accuracy, load_adversarial_batch, pgd, save_adversarial_batch, surrogate_gradient_attack
from .harness import (
    AttackConfig,
    DatasetConfig,
    ExperimentConfig,
    ScheduleConfig,
    export_histogram,
    load_config,
    run_sweep,
    weight_range,
)
from .model import Model, load_checkpoint, save_checkpoint
from .pruning import METHODS, SCOPES, PruneSpec, prune
from .quantization import QuantizedModel, load_quantized, quantize_model, save_quantized
from .trainer import evaluate, finetune, train, write_log
from .verification import run_all


def _shape(value):
    if value is None or isinstance(value, tuple):
        return value
    try:
        parts = tuple(int(v) for v in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected CxHxW, got {value!r}")
    if len(parts) != 3:
        raise click.BadParameter(f"expected CxHxW, got {value!r}")
    return parts


def dataset_options(fn):
    """Flags for the dataset section; unset flags fall back to the checkpoint or defaults."""
    opts = [
        click.option("--data", "kind", type=click.Choice(["blobs", "idx"]), default=None),
        click.option("--num-classes", type=int, default=None),
        click.option("--per-class", type=int, default=None),
        click.option("--test-per-class", type=int, default=None),
        click.option("--image-shape", callback=lambda c, p, v: _shape(v), default=None, help="CxHxW"),
        click.option("--noise", type=float, default=None),
        click.option("--amplitude", type=float, default=None),
        click.option("--data-seed", "data_seed", type=int, default=None),
        click.option("--train-images", type=click.Path(exists=True), default=None),
        click.option("--train-labels", type=click.Path(exists=True), default=None),
        click.option("--test-images", type=click.Path(exists=True), default=None),
        click.option("--test-labels", type=click.Path(exists=True), default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


_DATA_KEYS = (
    "kind",
    "num_classes",
    "per_class",
    "test_per_class",
    "image_shape",
    "noise",
    "amplitude",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
)


def _dataset_config(kwargs, extra=None) -> DatasetConfig:
    doc = dict((extra or {}).get("dataset", {}))
    for key in _DATA_KEYS:
        value = kwargs.pop(key, None)
        if value is not None:
            doc["seed" if key == "data_seed" else key] = value
    if "image_shape" in doc:
        doc["image_shape"] = tuple(doc["image_shape"])
    return DatasetConfig(**doc)


def _load_any(path):
    meta, _ = container.read(path)
    if meta["kind"] == "quantized":
        return load_quantized(path)
    return load_checkpoint(path)


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, sort_keys=True))


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Pruning, adversarial attacks and quantization on small image classifiers."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("train")
@click.option("--arch", type=click.Choice(["mlp", "minicnn"]), default="minicnn")
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--epochs", type=int, default=30)
@click.option("--lr", "base_lr", type=float, default=0.1)
@click.option("--lr-drop", "lr_drop_points", type=float, multiple=True, default=(0.25, 0.5))
@click.option("--weight-decay", type=float, default=1e-4)
@click.option("--batch-size", type=int, default=256)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@dataset_options
def train_cmd(arch, seed, out, log_path, **kwargs):
    """Train a model from scratch."""
    data = _dataset_config(kwargs)
    schedule = ScheduleConfig(**kwargs)
    train_ds, test_ds = data.load()
    model = Model(arch, train_ds.image_shape, train_ds.num_classes, seed=seed)
    model.checkpoint_extra = {"dataset": dataclasses.asdict(data), "train_seed": seed}
    _, log = train(model, train_ds, schedule.to_train_config(seed), eval_set=test_ds)
    if log_path:
        write_log(log, log_path)
    save_checkpoint(model, out)
    loss, acc = evaluate(model, test_ds)
    _emit({"model": out, "test_acc": acc, "test_loss": loss})


def attack_options(fn):
    defaults = AttackConfig()
    for opt in reversed(
        [
            click.option("--epsilon", type=float, default=defaults.epsilon),
            click.option("--alpha", type=float, default=defaults.alpha),
            click.option("--steps", type=int, default=defaults.steps),
            click.option("--no-random-start", "random_start", flag_value=False, default=True),
        ]
    ):
        fn = opt(fn)
    return fn


@main.command("attack")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--samples", type=int, default=1024, help="size of the seeded training subset")
@click.option("--split", type=click.Choice(["train", "test"]), default="train")
@attack_options
@dataset_options
def attack_cmd(model_path, seed, out, samples, split, epsilon, alpha, steps, random_start, **kwargs):
    """Generate PGD adversarial inputs against a model (quantized models use their twin's gradients)."""
    model = _load_any(model_path)
    extra = model.twin.checkpoint_extra if isinstance(model, QuantizedModel) else model.checkpoint_extra
    train_ds, test_ds = _dataset_config(kwargs, extra).load()
    subset = (train_ds if split == "train" else test_ds).sample(samples, seed)
    spec = AttackConfig(epsilon, alpha, steps, random_start).spec(seed)
    if isinstance(model, QuantizedModel):
        batch = surrogate_gradient_attack(model, model.twin, subset.images, subset.labels, spec)
    else:
        batch = pgd(model, subset.images, subset.labels, spec, generator_id=str(model_path))
    save_adversarial_batch(batch, out)
    _emit({"batch": out, "adv_acc": adversarial_accuracy(model, batch), "max_perturbation": batch.max_perturbation()})


@main.command("prune")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--scope", type=click.Choice(SCOPES), default="global")
@click.option("--compression", type=float, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--score-samples", type=int, default=2048)
@click.option("--hist", "hist_path", type=click.Path(dir_okay=False), default=None)
@click.option("--bins", type=int, default=64)
@attack_options
@dataset_options
def prune_cmd(model_path, method, scope, compression, seed, out, score_samples, hist_path, bins, **kwargs):
    """Score, mask and zero weights in one shot (no fine-tuning)."""
    attack = AttackConfig(kwargs.pop("epsilon"), kwargs.pop("alpha"), kwargs.pop("steps"), kwargs.pop("random_start"))
    model = load_checkpoint(model_path)
    train_ds, _ = _dataset_config(kwargs, model.checkpoint_extra).load()
    lo_hi = weight_range(model)
    pruned, result = prune(model, train_ds, PruneSpec(method, scope, compression, score_samples, seed), attack.spec(seed))
    if hist_path:
        export_histogram(pruned, result.masks, bins, lo_hi, hist_path)
    save_checkpoint(pruned, out)
    for note in result.warnings:
        click.echo(f"warning: {note}", err=True)
    _emit({"model": out, "kept": result.kept_count, "pruned": result.pruned_count, "compression": result.achieved_compression})


@main.command("finetune")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--epochs", type=int, default=5)
@click.option("--lr", "base_lr", type=float, default=0.001)
@click.option("--weight-decay", type=float, default=1e-4)
@click.option("--batch-size", type=int, default=256)
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@dataset_options
def finetune_cmd(model_path, seed, out, log_path, **kwargs):
    """Fine-tune a pruned model with its masks held fixed."""
    model = load_checkpoint(model_path)
    train_ds, test_ds = _dataset_config(kwargs, model.checkpoint_extra).load()
    schedule = ScheduleConfig(lr_drop_points=(), **kwargs)
    _, log = finetune(model, train_ds, schedule.to_train_config(seed, "finetune"), eval_set=test_ds)
    if log_path:
        write_log(log, log_path)
    save_checkpoint(model, out)
    _emit({"model": out, "test_acc": evaluate(model, test_ds)[1]})


@main.command("quantize")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def quantize_cmd(model_path, out):
    """Quantize weights to 8-bit codes (deterministic, no seed needed)."""
    qmodel = quantize_model(load_checkpoint(model_path))
    save_quantized(qmodel, out)
    errors = qmodel.round_trip_errors()
    _emit({"model": out, "max_round_trip_error": max(errors.values())})


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--adv", "adv_paths", type=click.Path(exists=True), multiple=True, help="adversarial batch files")
@dataset_options
def eval_cmd(model_path, adv_paths, **kwargs):
    """Clean test accuracy, plus accuracy on each given adversarial batch."""
    model = _load_any(model_path)
    extra = model.twin.checkpoint_extra if isinstance(model, QuantizedModel) else model.checkpoint_extra
    _, test_ds = _dataset_config(kwargs, extra).load()
    payload = {"model": model_path, "test_acc": model.accuracy(test_ds.images, test_ds.labels)}
    for path in adv_paths:
        batch = load_adversarial_batch(path)
        payload[f"adv:{path}"] = adversarial_accuracy(model, batch)
    _emit(payload)


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--output-dir", default=None)
@click.option("--seed", "seeds", type=int, multiple=True, help="trial seeds; overrides the config")
def sweep_cmd(config_path, output_dir, seeds):
    """Run the full prune / fine-tune / attack / quantize grid. Exits 1 if any cell failed."""
    config = load_config(config_path) if config_path else ExperimentConfig()
    if output_dir:
        config.output_dir = output_dir
    if seeds:
        config.trials = list(seeds)
    if not config_path and not seeds:
        raise click.UsageError("give --config or at least one --seed")
    result = run_sweep(config)
    for cell in result.failures:
        click.echo(f"failed: {cell.method}/{cell.scope} p={cell.compression:g} trial={cell.trial}: {cell.detail}", err=True)
    _emit({"output_dir": str(result.output_dir), "records": len(result.records), "failed_cells": len(result.failures)})
    sys.exit(0 if result.ok else 1)


@main.command("hist")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--bins", type=int, default=64)
@click.option("--range", "value_range", type=float, nargs=2, default=None)
def hist_cmd(model_path, out, bins, value_range):
    """Histogram of kept weights as CSV (bin_lo, bin_hi, count)."""
    model = load_checkpoint(model_path)
    hist = export_histogram(model, None, bins, value_range, out)
    _emit({"histogram": out, "kept": int(np.sum(hist.counts))})


@main.command("verify")
@click.option("--seed", type=int, required=True)
def verify_cmd(seed):
    """Run the gradient and mask oracles. Exits 1 on any failure."""
    reports = run_all(seed)
    for report in reports:
        click.echo(report.line())
    sys.exit(0 if all(r.passed for r in reports) else 1)


if __name__ == "__main__":
    main()
