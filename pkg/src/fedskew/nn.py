"""Dense MLP engine: forward, backprop, SGD with momentum.

Weights are stored ``[out x in]`` so a layer computes ``x @ W.T + b``.
Everything is float64 and every public function is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError, ValidationError

ACTIVATIONS = ("identity", "relu")
LOSS_KINDS = ("cross_entropy", "mse")


@dataclass
class ModelParams:
    """Weights and biases of a feed-forward stack of dense layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]
    dropout_rate: float = 0.0

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.activations = tuple(self.activations)
        n = len(self.weights)
        if n == 0 or len(self.biases) != n or len(self.activations) != n:
            raise ShapeError("weights, biases and activations must have the same nonzero length")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if act not in ACTIVATIONS:
                raise ValidationError(f"layer {i}: unknown activation {act!r}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[1]} does not chain with "
                    f"layer {i - 1} output dim {self.weights[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"layer {i}: non-finite parameter values")

    @property
    def layer_spec(self) -> list[tuple[int, int, str]]:
        return [(w.shape[1], w.shape[0], a) for w, a in zip(self.weights, self.activations)]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def same_spec(self, other: "ModelParams") -> bool:
        return self.layer_spec == other.layer_spec

    def _check_compatible(self, other: "ModelParams") -> None:
        if not self.same_spec(other):
            raise ShapeError(f"layer specs differ: {self.layer_spec} vs {other.layer_spec}")

    def _like(self, weights, biases) -> "ModelParams":
        return ModelParams(weights, biases, self.activations, self.dropout_rate)

    def copy(self) -> "ModelParams":
        return self._like([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def scale(self, factor: float) -> "ModelParams":
        return self._like([w * factor for w in self.weights], [b * factor for b in self.biases])

    def add(self, other: "ModelParams") -> "ModelParams":
        self._check_compatible(other)
        return self._like(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def sub(self, other: "ModelParams") -> "ModelParams":
        return self.add(other.scale(-1.0))

    __add__ = add
    __sub__ = sub

    def zeros_like(self) -> "ModelParams":
        return self._like([np.zeros_like(w) for w in self.weights],
                          [np.zeros_like(b) for b in self.biases])

    def flatten(self) -> np.ndarray:
        """All weights (row-major, layer order) followed by all biases."""
        return np.concatenate([w.ravel() for w in self.weights] + [b.ravel() for b in self.biases])

    def with_flat(self, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_params,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({self.num_params},)")
        weights, biases, pos = [], [], 0
        for w in self.weights:
            weights.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
        for b in self.biases:
            biases.append(flat[pos:pos + b.size].copy())
            pos += b.size
        return self._like(weights, biases)

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.same_spec(other) and np.allclose(self.flatten(), other.flatten(), **kw)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-for-bit equality of spec and values."""
        return (
            self.same_spec(other)
            and self.dropout_rate == other.dropout_rate
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass
class OptimizerState:
    velocity: ModelParams
    learning_rate: float
    momentum: float

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, model: ModelParams, learning_rate: float, momentum: float) -> "OptimizerState":
        return cls(model.zeros_like(), learning_rate, momentum)


def init_mlp(
    sizes: Sequence[int],
    *,
    seed,
    dropout_rate: float = 0.0,
    activations: Sequence[str] | None = None,
) -> ModelParams:
    """Glorot-uniform weights, zero biases; ReLU on hidden layers, identity on the last."""
    if len(sizes) < 2:
        raise ValidationError("need at least an input and an output size")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ("relu",) * (n_layers - 1) + ("identity",)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, tuple(activations), dropout_rate)


@dataclass
class _Trace:
    inputs: list[np.ndarray] = field(default_factory=list)
    relu_masks: list[np.ndarray | None] = field(default_factory=list)
    drop_masks: list[np.ndarray | None] = field(default_factory=list)


def _forward_trace(model: ModelParams, batch, training: bool, rng) -> tuple[np.ndarray, _Trace]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {x.shape}")
    use_dropout = training and model.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValidationError("rng is required for training with dropout")
    trace = _Trace()
    last = len(model.weights) - 1
    keep = 1.0 - model.dropout_rate
    for i, (w, b, act) in enumerate(zip(model.weights, model.biases, model.activations)):
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {i}: expected input width {w.shape[1]}, got {x.shape[1]}")
        trace.inputs.append(x)
        z = x @ w.T + b
        if act == "relu":
            mask = z > 0
            z = np.where(mask, z, 0.0)
            trace.relu_masks.append(mask)
        else:
            trace.relu_masks.append(None)
        if use_dropout and i < last:
            dmask = (rng.random(z.shape) < keep) / keep
            z = z * dmask
            trace.drop_masks.append(dmask)
        else:
            trace.drop_masks.append(None)
        x = z
    return x, trace


def _backward(model: ModelParams, trace: _Trace, grad_out: np.ndarray, input_grad: bool = True):
    """Return (weight grads, bias grads, grad wrt the network input or None)."""
    gw = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    g = grad_out
    for i in range(len(model.weights) - 1, -1, -1):
        if trace.drop_masks[i] is not None:
            g = g * trace.drop_masks[i]
        if trace.relu_masks[i] is not None:
            g = np.where(trace.relu_masks[i], g, 0.0)
        gw[i] = g.T @ trace.inputs[i]
        gb[i] = g.sum(axis=0)
        if i > 0 or input_grad:
            g = g @ model.weights[i]
    return gw, gb, (g if input_grad else None)


def forward(model: ModelParams, batch, training: bool = False, rng=None) -> np.ndarray:
    out, _ = _forward_trace(model, batch, training, rng)
    return out


def _loss_and_output_grad(out: np.ndarray, targets, loss_kind: str, batch_index):
    n = out.shape[0]
    if loss_kind == "cross_entropy":
        targets = np.asarray(targets)
        if targets.shape != (n,):
            raise ShapeError(f"expected {n} class targets, got shape {targets.shape}")
        if n and (targets.min() < 0 or targets.max() >= out.shape[1]):
            raise ValidationError(f"labels must lie in [0, {out.shape[1]})")
        targets = targets.astype(np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        denom = exp.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        loss = float(np.mean(np.log(denom[:, 0]) - shifted[rows, targets]))
        grad = exp / denom
        grad[rows, targets] -= 1.0
        grad /= n
    elif loss_kind == "mse":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != out.shape:
            raise ShapeError(f"mse targets {targets.shape} do not match output {out.shape}")
        diff = out - targets
        # per-sample squared error summed over features, averaged over the batch
        loss = float(np.sum(diff * diff) / n)
        grad = (2.0 / n) * diff
    else:
        raise ValidationError(f"unknown loss kind {loss_kind!r}")
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at batch {batch_index}", batch_index=batch_index)
    return loss, grad


def loss_and_grad(
    model: ModelParams,
    batch,
    targets,
    loss_kind: str = "cross_entropy",
    training: bool = False,
    rng=None,
    batch_index: int | None = None,
) -> tuple[float, ModelParams]:
    """Mean batch loss and its gradient with respect to every parameter."""
    out, trace = _forward_trace(model, batch, training, rng)
    if out.shape[0] == 0:
        raise ValidationError("empty batch")
    loss, g = _loss_and_output_grad(out, targets, loss_kind, batch_index)
    gw, gb, _ = _backward(model, trace, g, input_grad=False)
    return loss, model._like(gw, gb)


def sgd_step(model: ModelParams, grads: ModelParams, opt: OptimizerState) -> tuple[ModelParams, OptimizerState]:
    """v' = momentum * v + g ; theta' = theta - lr * v'."""
    model._check_compatible(grads)
    model._check_compatible(opt.velocity)
    vw = [opt.momentum * v + g for v, g in zip(opt.velocity.weights, grads.weights)]
    vb = [opt.momentum * v + g for v, g in zip(opt.velocity.biases, grads.biases)]
    lr = opt.learning_rate
    new_model = model._like(
        [w - lr * v for w, v in zip(model.weights, vw)],
        [b - lr * v for b, v in zip(model.biases, vb)],
    )
    return new_model, OptimizerState(opt.velocity._like(vw, vb), lr, opt.momentum)


def predict(model: ModelParams, inputs, batch_size: int | None = None) -> np.ndarray:
    """Row-wise argmax of the logits; ties go to the lowest class index."""
    x = np.asarray(inputs, dtype=np.float64)
    if batch_size is None or x.shape[0] <= batch_size:
        return np.argmax(forward(model, x), axis=1)
    parts = [np.argmax(forward(model, x[i:i + batch_size]), axis=1)
             for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts)


def chain(*models: ModelParams) -> ModelParams:
    """Stack models end to end (e.g. encoder then decoder) into one network."""
    weights, biases, acts = [], [], []
    for m in models:
        weights += m.weights
        biases += m.biases
        acts += m.activations
    return ModelParams(weights, biases, tuple(acts), models[0].dropout_rate)
