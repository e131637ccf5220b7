"""Experiment sweeps: prune / fine-tune / attack / quantize across a grid of cells.

A sweep trains one base model per trial seed, then for every
(method, scope, compression) cell prunes a copy, exports a histogram of the
surviving weights, fine-tunes, and records three accuracies:

``test_acc``      clean accuracy on the test split
``adv_acc``       accuracy on PGD inputs generated against the cell's own model
``transfer_acc``  accuracy on PGD inputs generated against the unpruned base model

Both attacks use the same seeded subset of the training split. With
``quantize`` every model is also quantized to 8 bits and measured again.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import statistics
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .attack import AdversarialBatch, AttackSpec, adversarial_accuracy, pgd
from .data import Dataset, blob_splits, load_idx
from .errors import ContractError, EmptyHistogramError
from .model import MaskSet, Model, save_checkpoint
from .pruning import METHODS, SCOPES, STRATEGIES, PruneSpec, prune
from .quantization import quantize_model
from .trainer import TrainConfig, finetune, train

logger = logging.getLogger(__name__)

METRICS = ("test_acc", "adv_acc", "transfer_acc")
RECORD_FIELDS = ("model_id", "method", "scope", "compression", "quantized", "trial", "metric", "value")
SUMMARY_FIELDS = ("method", "scope", "compression", "quantized", "metric", "mean", "std", "n", "flag")


class ConfigError(ContractError):
    pass


def derive_seed(trial: int, tag: str) -> int:
    """Independent, reproducible seed for one purpose within a trial."""
    return int(np.random.SeedSequence([trial, zlib.crc32(tag.encode())]).generate_state(1)[0])


# -- configuration -------------------------------------------------------------


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    image_shape: Tuple[int, int, int] = (1, 16, 16)
    noise: float = 0.2
    amplitude: float = 0.25
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def load(self) -> Tuple[Dataset, Dataset]:
        if self.kind == "blobs":
            return blob_splits(
                self.num_classes,
                self.per_class,
                self.test_per_class,
                self.image_shape,
                self.seed,
                noise=self.noise,
                amplitude=self.amplitude,
            )
        if self.kind == "idx":
            paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
            if not all(paths):
                raise ConfigError("idx datasets need train/test image and label paths")
            train_ds = load_idx(self.train_images, self.train_labels, "train", num_classes=self.num_classes)
            test_ds = load_idx(self.test_images, self.test_labels, "test", num_classes=self.num_classes)
            return train_ds, test_ds
        raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ScheduleConfig:
    epochs: int = 30
    base_lr: float = 0.1
    lr_drop_points: Tuple[float, ...] = (0.25, 0.5)
    weight_decay: float = 1e-4
    batch_size: int = 256

    def to_train_config(self, seed: int, mode: str = "train") -> TrainConfig:
        drops = () if mode == "finetune" else self.lr_drop_points
        return TrainConfig(self.epochs, self.base_lr, drops, self.weight_decay, self.batch_size, seed, mode)


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    clip_min: float = 0.0
    clip_max: float = 1.0

    def spec(self, seed: int) -> AttackSpec:
        return AttackSpec(self.epsilon, self.alpha, self.steps, self.random_start, self.clip_min, self.clip_max, seed)


@dataclass
class ExperimentConfig:
    architecture: str = "minicnn"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: ScheduleConfig = field(default_factory=ScheduleConfig)
    finetune: ScheduleConfig = field(
        default_factory=lambda: ScheduleConfig(epochs=5, base_lr=0.001, lr_drop_points=())
    )
    attack: AttackConfig = field(default_factory=AttackConfig)
    strategies: List[Tuple[str, str]] = field(default_factory=lambda: [tuple(s) for s in STRATEGIES])
    compressions: List[float] = field(default_factory=lambda: [2, 4, 8, 16, 32])
    quantize: bool = True
    trials: List[int] = field(default_factory=lambda: [0, 1, 2])
    adv_samples: int = 1024
    score_samples: int = 2048
    histogram_bins: int = 64
    output_dir: str = "runs/sweep"
    save_checkpoints: bool = True

    def __post_init__(self):
        self.strategies = [tuple(s) for s in self.strategies]
        self.trials = list(self.trials)
        if not self.trials:
            raise ConfigError("at least one trial seed is required")
        if len(set(self.trials)) != len(self.trials):
            raise ConfigError("trial seeds must be distinct")
        if any(not c >= 1 for c in self.compressions):
            raise ConfigError("every compression must be >= 1")
        for method, scope in self.strategies:
            if method not in METHODS or scope not in SCOPES:
                raise ConfigError(f"invalid strategy ({method!r}, {scope!r})")
        if self.adv_samples < 1 or self.score_samples < 1 or self.histogram_bins < 1:
            raise ConfigError("sample sizes and bin count must be positive")
        # validate nested specs eagerly
        self.attack.spec(0)
        self.train.to_train_config(0)
        self.finetune.to_train_config(0, "finetune")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc or {}, "config")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_NESTED = {"dataset": DatasetConfig, "train": ScheduleConfig, "finetune": ScheduleConfig, "attack": AttackConfig}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in doc.items():
        if cls is ExperimentConfig and key in _NESTED:
            sub = _NESTED[key]
            value = value or {}
            if key == "finetune":
                # fine-tuning keeps its own defaults for unspecified keys
                defaults = dataclasses.asdict(ExperimentConfig().finetune)
                _build(sub, value, f"{where}.{key}")
                defaults.update(value)
                value = defaults
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        elif key in ("image_shape", "lr_drop_points"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    """Read an experiment config (YAML). Unknown keys are rejected."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return ExperimentConfig.from_dict(doc or {})


def dump_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
    return path


# -- records -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    model_id: str
    method: str
    scope: str
    compression: float
    quantized: bool
    trial: int
    metric: str
    value: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"metric value {self.value} outside [0, 1]")

    @property
    def key(self):
        return (self.model_id, self.method, self.scope, self.compression, self.quantized, self.trial, self.metric)

    def row(self) -> List[str]:
        return [
            self.model_id,
            self.method,
            self.scope,
            _fmt_compression(self.compression),
            str(int(self.quantized)),
            str(self.trial),
            self.metric,
            f"{self.value:.6f}",
        ]

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "MetricsRecord":
        return cls(
            row["model_id"],
            row["method"],
            row["scope"],
            float(row["compression"]),
            row["quantized"] in ("1", "True", "true"),
            int(row["trial"]),
            row["metric"],
            float(row["value"]),
        )


def _fmt_compression(p: float) -> str:
    return f"{p:g}"


class RecordWriter:
    """Appends records to a CSV file, flushing after every write."""

    def __init__(self, path, fields: Sequence[str] = RECORD_FIELDS, fresh: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if fresh or not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(fields)
        self._seen = set()

    def write(self, rows: Iterable[Sequence[str]]) -> None:
        with self.path.open("a", newline="") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow(row)
            fh.flush()
            os.fsync(fh.fileno())

    def write_records(self, records: Iterable[MetricsRecord]) -> None:
        records = list(records)
        for r in records:
            if r.key in self._seen:
                raise ContractError(f"duplicate record {r.key}")
            self._seen.add(r.key)
        self.write(r.row() for r in records)


def read_records(path) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


# -- histograms -------------------------------------------------------------------


@dataclass
class HistogramExport:
    edges: np.ndarray
    counts: np.ndarray
    method: str
    compression: float
    before_finetune: bool = True

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("bin_lo", "bin_hi", "count"))
            for lo, hi, n in zip(self.edges[:-1], self.edges[1:], self.counts):
                writer.writerow((f"{lo:.8g}", f"{hi:.8g}", int(n)))
        return path


def weight_range(model: Model) -> Tuple[float, float]:
    values = np.concatenate([p.data.ravel() for p in model.params.prunable()])
    return float(values.min()), float(values.max())


def export_histogram(
    model: Model,
    masks: Optional[MaskSet] = None,
    bins: int = 64,
    value_range: Optional[Tuple[float, float]] = None,
    path=None,
    before_finetune: bool = True,
) -> HistogramExport:
    """Histogram of the kept (mask == 1) prunable weights.

    ``value_range`` fixes the bin edges so exports of different methods are
    comparable; by default the range of the kept values is used.

    Raises:
        EmptyHistogramError: if no weight is kept.
    """
    masks = masks if masks is not None else (model.masks or MaskSet.ones_like(model))
    kept = np.concatenate(
        [p.data[masks[p.name]].astype(np.float64) for p in model.params.prunable()]
    )
    if kept.size == 0:
        raise EmptyHistogramError("no kept parameters to histogram")
    if value_range is None:
        value_range = (float(kept.min()), float(kept.max()))
    lo, hi = value_range
    if hi <= lo:
        hi = lo + 1e-12
    counts, edges = np.histogram(np.clip(kept, lo, hi), bins=bins, range=(lo, hi))
    hist = HistogramExport(edges, counts, masks.method, masks.compression, before_finetune)
    if path is not None:
        hist.write_csv(path)
    return hist


# -- evaluation ----------------------------------------------------------------------


def transfer_attack_eval(
    generator_model,
    target_model,
    adv: "AdversarialBatch | AttackSpec",
    images: Optional[np.ndarray] = None,
    labels: Optional[np.ndarray] = None,
    *,
    method: str = "none",
    scope: str = "none",
    compression: float = 1.0,
    quantized: bool = False,
    trial: int = 0,
) -> MetricsRecord:
    """Accuracy of ``target_model`` on adversarial inputs crafted against ``generator_model``.

    ``adv`` is either a ready batch or an :class:`AttackSpec`, in which case
    ``images`` and ``labels`` are attacked on the generator first.
    """
    if getattr(generator_model, "input_shape", None) != getattr(target_model, "input_shape", None) or (
        generator_model.num_classes != target_model.num_classes
    ):
        raise ContractError(
            f"generator {generator_model.arch_id} and target {target_model.arch_id} are incompatible"
        )
    if isinstance(adv, AttackSpec):
        if images is None or labels is None:
            raise ContractError("an attack spec needs images and labels")
        adv = pgd(generator_model, images, labels, adv)
    value = adversarial_accuracy(target_model, adv)
    return MetricsRecord(target_model.arch_id, method, scope, compression, quantized, trial, "transfer_acc", value)


def cell_records(model_id, method, scope, p, quantized, trial, test_acc, adv_acc, transfer_acc):
    values = dict(test_acc=test_acc, adv_acc=adv_acc, transfer_acc=transfer_acc)
    return [MetricsRecord(model_id, method, scope, float(p), quantized, trial, m, values[m]) for m in METRICS]


@dataclass
class CellStatus:
    trial: int
    method: str
    scope: str
    compression: float
    quantized: bool
    status: str
    degenerate: bool = False
    detail: str = ""

    def row(self):
        return [
            self.trial,
            self.method,
            self.scope,
            _fmt_compression(self.compression),
            int(self.quantized),
            self.status,
            int(self.degenerate),
            self.detail,
        ]


CELL_FIELDS = ("trial", "method", "scope", "compression", "quantized", "status", "degenerate", "detail")


@dataclass
class SweepResult:
    records: List[MetricsRecord]
    cells: List[CellStatus]
    output_dir: Path

    @property
    def failures(self) -> List[CellStatus]:
        return [c for c in self.cells if c.status != "ok"]

    @property
    def ok(self) -> bool:
        return not self.failures


def _evaluate(model, test: Dataset, self_batch: AdversarialBatch, base_batch: AdversarialBatch):
    return (
        model.accuracy(test.images, test.labels),
        adversarial_accuracy(model, self_batch),
        adversarial_accuracy(model, base_batch),
    )


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Run the full experiment grid described by ``config``.

    Records are appended to ``metrics.csv`` as each cell finishes. A failing
    cell is logged in ``cells.csv`` with its error and the sweep moves on.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    writer = RecordWriter(out / "metrics.csv")
    cell_writer = RecordWriter(out / "cells.csv", CELL_FIELDS)
    records: List[MetricsRecord] = []
    cells: List[CellStatus] = []

    def emit(recs, status: CellStatus):
        writer.write_records(recs)
        cell_writer.write([status.row()])
        records.extend(recs)
        cells.append(status)

    def fail(trial, method, scope, p, quantized, exc):
        logger.exception("cell failed: trial %s %s/%s p=%s", trial, method, scope, p)
        status = CellStatus(trial, method, scope, float(p), quantized, "failed", detail=f"{type(exc).__name__}: {exc}")
        cell_writer.write([status.row()])
        cells.append(status)

    train_ds, test_ds = config.dataset.load()
    chance = 1.0 / train_ds.num_classes
    degenerate_at = chance + 0.05

    for trial in config.trials:
        try:
            base = Model(config.architecture, train_ds.image_shape, train_ds.num_classes, seed=derive_seed(trial, "init"))
            train(base, train_ds, config.train.to_train_config(derive_seed(trial, "train")))
            subset = train_ds.sample(config.adv_samples, derive_seed(trial, "adv-subset"))
            base_batch = pgd(base, subset.images, subset.labels, config.attack.spec(derive_seed(trial, "attack")))
            base_batch.generator_id = f"{base.arch_id}/unpruned/t{trial}"
            model_id = base.arch_id
            bins_range = weight_range(base)
            if config.save_checkpoints:
                save_checkpoint(base, out / "checkpoints" / f"t{trial}-unpruned.gapw", {"trial": trial})
        except Exception as exc:  # noqa: BLE001 - record and move to the next trial
            fail(trial, "none", "none", 1.0, False, exc)
            continue

        variants = [(False, base)]
        if config.quantize:
            variants.append((True, quantize_model(base)))
        for quantized, m in variants:
            try:
                # the unpruned model generated base_batch, so self and transfer coincide
                acc = _evaluate(m, test_ds, base_batch, base_batch)
                emit(
                    cell_records(model_id, "none", "none", 1, quantized, trial, *acc),
                    CellStatus(trial, "none", "none", 1.0, quantized, "ok", acc[0] <= degenerate_at),
                )
            except Exception as exc:  # noqa: BLE001
                fail(trial, "none", "none", 1.0, quantized, exc)

        for method, scope in config.strategies:
            for p in config.compressions:
                tag = f"{method}-{scope}-p{_fmt_compression(p)}-t{trial}"
                try:
                    spec = PruneSpec(method, scope, float(p), config.score_samples, derive_seed(trial, f"score-{method}"))
                    pruned, result = prune(
                        base, train_ds, spec, config.attack.spec(derive_seed(trial, "gap-attack"))
                    )
                    export_histogram(
                        pruned, result.masks, config.histogram_bins, bins_range, out / "histograms" / f"{tag}.csv"
                    )
                    finetune(pruned, train_ds, config.finetune.to_train_config(derive_seed(trial, f"ft-{tag}"), "finetune"))
                    if config.save_checkpoints:
                        save_checkpoint(pruned, out / "checkpoints" / f"{tag}.gapw", {"trial": trial})
                    self_batch = pgd(
                        pruned, subset.images, subset.labels, config.attack.spec(derive_seed(trial, "attack"))
                    )
                    acc = _evaluate(pruned, test_ds, self_batch, base_batch)
                    emit(
                        cell_records(model_id, method, scope, p, False, trial, *acc),
                        CellStatus(trial, method, scope, float(p), False, "ok", acc[0] <= degenerate_at),
                    )
                except Exception as exc:  # noqa: BLE001
                    fail(trial, method, scope, p, False, exc)
                    continue
                if not config.quantize:
                    continue
                try:
                    qmodel = quantize_model(pruned)
                    # surrogate-gradient PGD on the quantized model uses the full-precision
                    # twin's gradients with the same seed, which is exactly self_batch
                    acc = _evaluate(qmodel, test_ds, self_batch, base_batch)
                    emit(
                        cell_records(model_id, method, scope, p, True, trial, *acc),
                        CellStatus(trial, method, scope, float(p), True, "ok", acc[0] <= degenerate_at),
                    )
                except Exception as exc:  # noqa: BLE001
                    fail(trial, method, scope, p, True, exc)

    summarize(records, expected_cells(config)).write_csv(out / "summary.csv")
    return SweepResult(records, cells, out)


def expected_cells(config: ExperimentConfig) -> List[Tuple[str, str, float, bool, str]]:
    quant_flags = (False, True) if config.quantize else (False,)
    cells = [("none", "none", 1.0, q, m) for q in quant_flags for m in METRICS]
    for method, scope in config.strategies:
        for p in config.compressions:
            for q in quant_flags:
                cells.extend((method, scope, float(p), q, m) for m in METRICS)
    return cells


def expected_record_count(config: ExperimentConfig) -> int:
    return len(expected_cells(config)) * len(config.trials)


# -- summaries --------------------------------------------------------------------------


@dataclass
class SummaryRow:
    method: str
    scope: str
    compression: float
    quantized: bool
    metric: str
    mean: float
    std: float
    n: int
    flag: str = ""

    def row(self):
        mean = "" if math.isnan(self.mean) else f"{self.mean:.6f}"
        std = "" if math.isnan(self.std) else f"{self.std:.6f}"
        return [self.method, self.scope, _fmt_compression(self.compression), int(self.quantized), self.metric, mean, std, self.n, self.flag]


@dataclass
class Summary:
    rows: List[SummaryRow]

    @property
    def missing(self) -> List[SummaryRow]:
        return [r for r in self.rows if r.flag == "missing"]

    def lookup(self, method, scope, compression, quantized, metric) -> SummaryRow:
        for r in self.rows:
            if (r.method, r.scope, r.compression, r.quantized, r.metric) == (
                method,
                scope,
                float(compression),
                quantized,
                metric,
            ):
                return r
        raise KeyError((method, scope, compression, quantized, metric))

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_FIELDS)
            for r in self.rows:
                writer.writerow(r.row())
        return path


def summarize(records: Sequence[MetricsRecord], expected: Optional[Sequence[tuple]] = None) -> Summary:
    """Mean and sample standard deviation per (method, scope, compression, quantized, metric).

    A single-trial cell gets ``std = 0`` and the flag ``single_trial``. Cells
    listed in ``expected`` without any record appear with the flag ``missing``.
    """
    groups: Dict[tuple, List[float]] = {}
    for r in records:
        groups.setdefault((r.method, r.scope, float(r.compression), r.quantized, r.metric), []).append(r.value)
    keys = list(groups)
    if expected is not None:
        keys += [tuple(k[:2]) + (float(k[2]),) + tuple(k[3:]) for k in expected]
    rows = []
    seen = set()
    for key in keys:
        if key in seen:
            continue
        seen.add(key)
        values = groups.get(key)
        if not values:
            rows.append(SummaryRow(*key, math.nan, math.nan, 0, "missing"))
            continue
        if len(values) == 1:
            rows.append(SummaryRow(*key, values[0], 0.0, 1, "single_trial"))
            continue
        rows.append(SummaryRow(*key, statistics.fmean(values), statistics.stdev(values), len(values)))
    return Summary(rows)
