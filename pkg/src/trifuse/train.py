"""Training loop, Adam, evaluation metrics, and sweep drivers.

Everything here is deterministic given the config seed: the split, the
per-epoch shuffles, and parameter init all derive from it, so a rerun
reproduces the same epoch logs and reports byte for byte.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import DatasetHeader, FeatureRecord, SplitManifest, batches, resolve_split, split, stack_features
from .fusion import CHANNELS, FusionConfig
from .model import Model, ModelConfig
from .tensor import NonFiniteError, Tensor, backward

__all__ = [
    "Metrics",
    "Adam",
    "MissingGradientError",
    "TrainingDivergedError",
    "TrainConfig",
    "EpochLog",
    "TrainResult",
    "train",
    "evaluate",
    "StrategyResult",
    "COMPARISON_STRATEGIES",
    "compare_fusions",
    "AblationRow",
    "all_ablation_toggles",
    "run_ablation",
    "render_csv",
    "render_table",
    "REPORT_COLUMNS",
]

logger = logging.getLogger("trifuse.train")


@dataclass(frozen=True)
class Metrics:
    """Binary classification scores; fake (label 1) is the positive class.

    Zero denominators follow the usual convention and score 0. The
    real-class scores treat real as the positive class instead.
    """

    accuracy: float
    fake_precision: float
    fake_recall: float
    fake_f1: float
    real_precision: float
    real_recall: float
    real_f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @staticmethod
    def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int) -> "Metrics":
        total = tp + fp + tn + fn
        if total == 0:
            raise ValueError("metrics need at least one sample")
        fake_p, fake_r, fake_f = cls._prf(tp, fp, fn)
        real_p, real_r, real_f = cls._prf(tn, fn, fp)
        return cls(
            accuracy=(tp + tn) / total,
            fake_precision=fake_p, fake_recall=fake_r, fake_f1=fake_f,
            real_precision=real_p, real_recall=real_r, real_f1=real_f,
            tp=tp, fp=fp, tn=tn, fn=fn,
        )

    @classmethod
    def from_predictions(cls, predicted: np.ndarray, labels: np.ndarray) -> "Metrics":
        predicted = np.asarray(predicted)
        labels = np.asarray(labels)
        if predicted.shape != labels.shape:
            raise ValueError(f"predictions {predicted.shape} vs labels {labels.shape}")
        tp = int(np.sum((predicted == 1) & (labels == 1)))
        fp = int(np.sum((predicted == 1) & (labels == 0)))
        tn = int(np.sum((predicted == 0) & (labels == 0)))
        fn = int(np.sum((predicted == 0) & (labels == 1)))
        return cls.from_counts(tp, fp, tn, fn)


class MissingGradientError(RuntimeError):
    """step() was called while some parameter has no gradient."""


class TrainingDivergedError(ArithmeticError):
    """A non-finite value appeared during training."""


class Adam:
    """Adam with bias correction; state is keyed by parameter name, so
    behavior does not depend on registration order."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient; run backward() first")
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            update = (m / correct1) / (np.sqrt(v / correct2) + self.eps)
            p.data = p.data - self.lr * update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass(frozen=True)
class TrainConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    test_fraction: float = 0.2
    hidden1: int = 64
    hidden2: int = 32
    precision: str = "single"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2 for batch statistics, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.hidden1 < 1 or self.hidden2 < 1:
            raise ValueError("hidden layer widths must be positive")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    train_metrics: Metrics
    test_metrics: Metrics | None


@dataclass
class TrainResult:
    model: Model
    epochs: list[EpochLog]
    split: SplitManifest

    @property
    def final_metrics(self) -> Metrics:
        last = self.epochs[-1]
        return last.test_metrics if last.test_metrics is not None else last.train_metrics


Dataset = tuple[DatasetHeader, Sequence[FeatureRecord]]


def train(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Fit one model on a stratified split of the dataset.

    Aborts with epoch and batch coordinates if any kernel produces a
    non-finite value.
    """
    header, records = dataset
    manifest = split(records, config.test_fraction, config.seed)
    train_records, test_records = resolve_split(records, manifest)
    if len(train_records) < 2:
        raise ValueError(f"need at least 2 training records, got {len(train_records)}")

    model_config = ModelConfig(
        fusion=config.fusion,
        dims=header.dims(),
        hidden1=config.hidden1,
        hidden2=config.hidden2,
        precision=config.precision,
    )
    model = Model(model_config, seed=config.seed)
    optimizer = Adam(model.parameters(), lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)

    logs: list[EpochLog] = []
    for epoch in range(config.epochs):
        seen = 0
        total = 0.0
        for batch_index, chunk in enumerate(batches(train_records, config.batch_size, config.seed, epoch)):
            feats, labels = stack_features(chunk)
            try:
                loss, _ = model.training_loss(feats, labels)
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: {exc}"
                ) from exc
            optimizer.step()
            optimizer.zero_grad()
            total += loss.item() * len(chunk)
            seen += len(chunk)
        logs.append(EpochLog(
            epoch=epoch,
            train_loss=total / seen if seen else float("nan"),
            train_metrics=evaluate(model, train_records),
            test_metrics=evaluate(model, test_records) if test_records else None,
        ))
    return TrainResult(model, logs, manifest)


def evaluate(model: Model, records: Sequence[FeatureRecord], batch_size: int = 256) -> Metrics:
    """Score a model over records in eval mode, threshold 0.5.

    A probability of exactly 0.5 counts as a fake call.
    """
    if not records:
        raise ValueError("evaluate: no records")
    chunks = []
    for start in range(0, len(records), batch_size):
        feats, _ = stack_features(records[start:start + batch_size])
        chunks.append(model.predict_proba(feats, training=False).data)
    probs = np.concatenate(chunks)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return Metrics.from_predictions((probs >= 0.5).astype(np.int64), labels)


def _worker_count() -> int:
    raw = os.environ.get("TRIFUSE_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        logger.warning("ignoring non-integer TRIFUSE_THREADS=%r", raw)
        return 1
    return max(1, value)


def _run_all(tasks: Sequence[Callable]):
    """Run tasks, optionally on a capped thread pool; results keep input order."""
    workers = _worker_count()
    if workers == 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda task: task(), tasks))


COMPARISON_STRATEGIES = ("tri_transformer", "early", "late", "hybrid", "tensor")


@dataclass(frozen=True)
class StrategyResult:
    name: str
    metrics: Metrics | None
    error: str | None = None


def compare_fusions(
    dataset: Dataset,
    config: TrainConfig,
    strategies: Sequence[str] = COMPARISON_STRATEGIES,
) -> list[StrategyResult]:
    """Train every strategy on the same split and report test metrics.

    A strategy that fails is reported as a row with the error message;
    the rest of the sweep still runs.
    """

    def job(strategy: str) -> StrategyResult:
        try:
            cfg = replace(config, fusion=replace(config.fusion, strategy=strategy))
            result = train(dataset, cfg)
            return StrategyResult(strategy, result.final_metrics)
        except Exception as exc:
            return StrategyResult(strategy, None, f"{type(exc).__name__}: {exc}")

    return _run_all([lambda s=s: job(s) for s in strategies])


@dataclass(frozen=True)
class AblationRow:
    label: str
    channel_mask: tuple[bool, bool, bool]
    fusion_on: bool
    metrics: Metrics | None
    attention_parameters: int
    error: str | None = None


def all_ablation_toggles() -> list[tuple[tuple[bool, bool, bool], bool]]:
    """Every non-empty channel mask crossed with fusion on/off."""
    masks = [mask for mask in product((True, False), repeat=3) if any(mask)]
    return [(mask, fusion_on) for mask in masks for fusion_on in (True, False)]


def _toggle_label(mask: tuple[bool, bool, bool], fusion_on: bool) -> str:
    channels = "+".join(name for name, keep in zip(CHANNELS, mask) if keep)
    return f"{channels}|fusion={'on' if fusion_on else 'off'}"


def run_ablation(
    dataset: Dataset,
    config: TrainConfig,
    toggles: Sequence[tuple[tuple[bool, bool, bool], bool]] | None = None,
) -> list[AblationRow]:
    """Train one model per (channel mask, fusion on/off) toggle.

    Fusion off means plain pooled concatenation with no attention stage;
    fusion on uses the configured strategy (or the attention default if
    the config itself asked for the no-fusion mode). Each row records the
    trained model's attention parameter count so the off rows are
    auditable.
    """
    if toggles is None:
        toggles = all_ablation_toggles()
    on_strategy = config.fusion.strategy if config.fusion.strategy != "concat_only" else "tri_transformer"

    def job(mask: tuple[bool, bool, bool], fusion_on: bool) -> AblationRow:
        label = _toggle_label(mask, fusion_on)
        strategy = on_strategy if fusion_on else "concat_only"
        try:
            cfg = replace(config, fusion=replace(config.fusion, strategy=strategy, channel_mask=mask))
            result = train(dataset, cfg)
            return AblationRow(
                label, mask, fusion_on, result.final_metrics, result.model.attention_parameter_count()
            )
        except Exception as exc:
            return AblationRow(label, mask, fusion_on, None, 0, f"{type(exc).__name__}: {exc}")

    return _run_all([lambda m=mask, f=fusion_on: job(m, f) for mask, fusion_on in toggles])


REPORT_COLUMNS = (
    "config",
    "accuracy",
    "fake_precision",
    "fake_recall",
    "fake_f1",
    "real_precision",
    "real_recall",
    "real_f1",
)

_METRIC_FIELDS = REPORT_COLUMNS[1:]


def _report_cells(label: str, metrics: Metrics | None, error: str | None) -> list[str]:
    if metrics is None:
        return [label] + [""] * (len(_METRIC_FIELDS) - 1) + [f"error: {error}" if error else ""]
    return [label] + [f"{getattr(metrics, name):.6f}" for name in _METRIC_FIELDS]


def render_csv(rows: Sequence[tuple[str, Metrics | None, str | None]]) -> str:
    """Metrics rows as CSV text with the fixed report schema."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for label, metrics, error in rows:
        writer.writerow(_report_cells(label, metrics, error))
    return buffer.getvalue()


def render_table(rows: Sequence[tuple[str, Metrics | None, str | None]]) -> str:
    """The same rows as a fixed-width table for terminals."""
    header = list(REPORT_COLUMNS)
    body = [_report_cells(label, metrics, error) for label, metrics, error in rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(header, widths)).rstrip(),
        "  ".join("-" * width for width in widths),
    ]
    for row in body:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"
