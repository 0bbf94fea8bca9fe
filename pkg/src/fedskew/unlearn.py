"""Client removal by projected gradient ascent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import ClientShard
from .errors import NumericError, ShapeError, ValidationError
from .nn import ModelParams, loss_and_grad


@dataclass
class UnlearnConfig:
    reference: ModelParams
    ascent_steps: int = 50
    ascent_lr: float = 0.01
    # None means radius_scale * ||flatten(reference)||
    radius: float | None = None
    radius_scale: float = 0.04
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.ascent_steps < 1:
            raise ValidationError("ascent_steps must be >= 1")
        if not self.ascent_lr > 0:
            raise ValidationError("ascent_lr must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.radius is not None and (not math.isfinite(self.radius) or self.radius < 0):
            raise ValidationError(f"radius must be finite and non-negative, got {self.radius}")
        if not (math.isfinite(self.radius_scale) and self.radius_scale >= 0):
            raise ValidationError(f"radius_scale must be finite and non-negative, got {self.radius_scale}")

    def resolved_radius(self) -> float:
        if self.radius is None:
            return self.radius_scale * float(np.linalg.norm(self.reference.flatten()))
        return float(self.radius)


@dataclass
class UnlearnTrace:
    radius: float
    losses: list[float] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"radius": self.radius, "step_loss": self.losses, "distance_to_reference": self.distances}


def projection(params: ModelParams, reference: ModelParams, radius: float) -> ModelParams:
    """Project ``params`` onto the L2 ball of ``radius`` around ``reference``."""
    if not params.same_spec(reference):
        raise ShapeError("params and reference have different layer specs")
    p = params.flatten()
    r = reference.flatten()
    diff = p - r
    dist = float(np.linalg.norm(diff))
    if dist <= radius:
        return params
    return params.with_flat(r + (radius / dist) * diff)


def upga_unlearn(global_model: ModelParams, unlearn_shard: ClientShard, cfg: UnlearnConfig,
                 return_trace: bool = False):
    """Gradient ascent on the departing client's data, projected after every step.

    Mini-batches come from a seeded reshuffle each pass over the shard; a
    batch size at least the shard size gives full-batch ascent.
    """
    data = unlearn_shard.data
    n = len(data)
    if n == 0:
        raise ValidationError("unlearning shard is empty")
    if not global_model.same_spec(cfg.reference):
        raise ShapeError("global model and reference differ in layer spec")
    radius = cfg.resolved_radius()
    trace = UnlearnTrace(radius)
    rng = seeding.make_rng(cfg.seed, seeding.UNLEARN)
    ref_flat = cfg.reference.flatten()
    model = global_model
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    for step in range(cfg.ascent_steps):
        if pos >= len(order):
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + cfg.batch_size]
        pos += cfg.batch_size
        try:
            loss, grads = loss_and_grad(model, data.features[idx], data.labels[idx], "cross_entropy",
                                        batch_index=step)
        except NumericError as exc:
            raise NumericError(f"ascent step {step}: {exc}", step=step) from exc
        model = projection(model.add(grads.scale(cfg.ascent_lr)), cfg.reference, radius)
        trace.losses.append(loss)
        trace.distances.append(float(np.linalg.norm(model.flatten() - ref_flat)))
    return (model, trace) if return_trace else model
