"""Federated simulation: local training, FedAvg aggregation, evaluation."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import seeding
from .data import ClientShard, LabeledDataset
from .errors import AggregationError, NumericError, ShapeError, ValidationError
from .nn import ModelParams, OptimizerState, loss_and_grad, predict, sgd_step

log = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 128


@dataclass
class FedRoundConfig:
    local_epochs: int = 2
    global_rounds: int = 10
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1 or self.global_rounds < 1 or self.batch_size < 1:
            raise ValidationError("local_epochs, global_rounds and batch_size must be >= 1")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValidationError("learning_rate must be >= 0 and momentum in [0, 1)")


@dataclass
class EvalReport:
    per_class_accuracy: np.ndarray
    balanced_accuracy: float
    skewed_class_accuracy: float
    overall_accuracy: float
    confusion: np.ndarray
    skewed_class: int | None = None

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "skewed_class_accuracy": self.skewed_class_accuracy,
            "skewed_class": self.skewed_class,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.tolist(),
        }


def evaluate(model: ModelParams, test: LabeledDataset, skewed_class: int | None = None,
             batch_size: int = EVAL_BATCH_SIZE) -> EvalReport:
    """Confusion-matrix based report; classes missing from ``test`` get NaN accuracy."""
    if len(test) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    if model.output_dim != test.class_count:
        raise ShapeError(f"model has {model.output_dim} outputs, test set has {test.class_count} classes")
    pred = predict(model, test.features, batch_size=batch_size)
    c = test.class_count
    confusion = np.bincount(test.labels * c + pred, minlength=c * c).reshape(c, c)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / np.maximum(support, 1), np.nan)
    balanced = float(np.nanmean(per_class))
    overall = float(np.trace(confusion) / len(test))
    skewed = float(per_class[skewed_class]) if skewed_class is not None else float("nan")
    return EvalReport(per_class, balanced, skewed, overall, confusion, skewed_class)


def local_train(model: ModelParams, shard: ClientShard, cfg: FedRoundConfig, client_seed: int) -> ModelParams:
    """``cfg.local_epochs`` epochs of mini-batch SGD with momentum, fresh velocity."""
    data = shard.data
    if data.dim != model.input_dim or data.class_count != model.output_dim:
        raise ShapeError(
            f"client {shard.client_id}: data ({data.dim} features, {data.class_count} classes) "
            f"does not fit model {model.input_dim}->{model.output_dim}"
        )
    n = len(data)
    if n == 0:
        return model.copy()
    opt = OptimizerState.fresh(model, cfg.learning_rate, cfg.momentum)
    current = model
    for epoch in range(cfg.local_epochs):
        rng = seeding.make_rng(client_seed, epoch)
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                _, grads = loss_and_grad(current, data.features[idx], data.labels[idx],
                                         "cross_entropy", training=True, rng=rng, batch_index=b)
            except NumericError as exc:
                raise NumericError(f"client {shard.client_id}: {exc}", batch_index=exc.batch_index,
                                   client_id=shard.client_id) from exc
            current, opt = sgd_step(current, grads, opt)
    return current


def aggregate(models: Sequence[ModelParams], data_sizes: Sequence[int]) -> ModelParams:
    """Data-size weighted average of models."""
    if len(models) == 0:
        raise AggregationError("nothing to aggregate")
    if len(models) != len(data_sizes):
        raise AggregationError(f"{len(models)} models but {len(data_sizes)} sizes")
    sizes = np.asarray(data_sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise AggregationError("every data size must be positive")
    first = models[0]
    for i, m in enumerate(models[1:], start=1):
        if not first.same_spec(m):
            raise AggregationError(f"model {i} spec {m.layer_spec} differs from {first.layer_spec}")
    if len(models) == 1:
        return first.copy()
    weights = sizes / sizes.sum()
    out_w = [sum(wt * m.weights[l] for wt, m in zip(weights, models)) for l in range(len(first.weights))]
    out_b = [sum(wt * m.biases[l] for wt, m in zip(weights, models)) for l in range(len(first.biases))]
    return ModelParams(out_w, out_b, first.activations, first.dropout_rate)


def client_seed(seed: int, client_id: int, round_index: int) -> int:
    return seeding.derive_seed(seed, seeding.LOCAL, client_id, round_index)


def run_federated(
    shards: Sequence[ClientShard],
    cfg: FedRoundConfig,
    init_model: ModelParams,
    *,
    test: LabeledDataset | None = None,
    skewed_class: int | None = None,
    threads: int = 1,
    on_round: Callable[[int, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[EvalReport]]:
    """Broadcast, train every shard locally, aggregate by shard size; repeat."""
    if not shards:
        raise ValidationError("run_federated needs at least one shard")
    sizes = [len(s) for s in shards]
    global_model = init_model
    trace: list[EvalReport] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(cfg.global_rounds):
            def train(shard, gm=global_model, r=r):
                return local_train(gm, shard, cfg, client_seed(cfg.seed, shard.client_id, r))

            try:
                if pool is None:
                    local = [train(s) for s in shards]
                else:
                    local = list(pool.map(train, shards))
            except NumericError as exc:
                raise NumericError(f"round {r}: {exc}", batch_index=exc.batch_index,
                                   client_id=exc.client_id, step=r) from exc
            global_model = aggregate(local, sizes)
            if test is not None:
                report = evaluate(global_model, test, skewed_class)
                trace.append(report)
                log.debug("round %d overall=%.4f balanced=%.4f skewed=%.4f", r,
                          report.overall_accuracy, report.balanced_accuracy, report.skewed_class_accuracy)
            if on_round is not None:
                on_round(r, global_model)
    finally:
        if pool is not None:
            pool.shutdown()
    return global_model, trace


def _fmt(x: float) -> str:
    return "nan" if x is None or np.isnan(x) else f"{x:.6g}"


def metrics_csv(trace: Sequence[EvalReport], client_count: int, stage: str | None = None) -> str:
    """Round-by-round metrics as CSV text (6 significant digits)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_cls = len(trace[0].per_class_accuracy) if trace else 0
    header = ["round", "client_count", "overall_acc", "balanced_acc", "skewed_acc"]
    header += [f"acc_class_{c}" for c in range(n_cls)]
    if stage is not None:
        header = ["stage"] + header
    writer.writerow(header)
    for r, rep in enumerate(trace):
        row = [r, client_count, _fmt(rep.overall_accuracy), _fmt(rep.balanced_accuracy),
               _fmt(rep.skewed_class_accuracy)] + [_fmt(a) for a in rep.per_class_accuracy]
        if stage is not None:
            row = [stage] + row
        writer.writerow(row)
    return buf.getvalue()


def config_dict(cfg: FedRoundConfig) -> dict:
    return asdict(cfg)
