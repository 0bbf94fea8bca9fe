"""Per-client encoder/decoder with forward and reverse-order reconstruction losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import seeding
from ..data import ClientShard
from ..errors import ValidationError
from ..nn import ModelParams, OptimizerState, _backward, _forward_trace, forward, init_mlp, sgd_step

log = logging.getLogger(__name__)


@dataclass
class AutoencoderPair:
    encoder: ModelParams
    decoder: ModelParams

    def __post_init__(self):
        if self.encoder.output_dim != self.decoder.input_dim:
            raise ValidationError(
                f"encoder emits {self.encoder.output_dim} dims, decoder expects {self.decoder.input_dim}"
            )
        if self.decoder.output_dim != self.encoder.input_dim:
            raise ValidationError("decoder output dim must equal the data dim")

    @property
    def latent_dim(self) -> int:
        return self.encoder.output_dim

    def encode(self, x) -> np.ndarray:
        return forward(self.encoder, x)

    def decode(self, z) -> np.ndarray:
        return forward(self.decoder, z)


@dataclass
class AutoencoderHistory:
    initial_l1: float
    final_l1: float
    epoch_l1: list[float] = field(default_factory=list)
    epoch_l2: list[float] = field(default_factory=list)
    reverse_classes: list[int | None] = field(default_factory=list)
    skipped_l2_batches: int = 0


def init_autoencoder(data_dim: int, latent_dim: int, hidden: int, seed: int) -> AutoencoderPair:
    """Symmetric d -> hidden -> latent -> hidden -> d, ReLU hidden, identity outputs."""
    if not 0 < latent_dim < data_dim:
        raise ValidationError(f"latent_dim must lie in (0, {data_dim}), got {latent_dim}")
    enc = init_mlp([data_dim, hidden, latent_dim], seed=seeding.derive_seed(seed, seeding.AE_INIT, 0))
    dec = init_mlp([latent_dim, hidden, data_dim], seed=seeding.derive_seed(seed, seeding.AE_INIT, 1))
    return AutoencoderPair(enc, dec)


def _grads(pair: AutoencoderPair, batch: np.ndarray, reverse: bool):
    """Loss and parameter gradients for one reconstruction term.

    ``reverse=False`` is the plain reconstruction loss: mean over samples of
    ||dec(enc(d_h)) - d_h||^2.  ``reverse=True`` feeds the latent codes of an
    ordered sequence to the decoder back to front and scores output q against
    sample q, i.e. dec(enc(d_{p+1-q})) versus d_q.
    """
    n = batch.shape[0]
    latents, enc_trace = _forward_trace(pair.encoder, batch, False, None)
    dec_in = latents[::-1] if reverse else latents
    out, dec_trace = _forward_trace(pair.decoder, dec_in, False, None)
    diff = out - batch
    loss = float(np.sum(diff * diff) / n)
    gw_d, gb_d, g_latent = _backward(pair.decoder, dec_trace, (2.0 / n) * diff)
    if reverse:
        g_latent = g_latent[::-1]
    gw_e, gb_e, _ = _backward(pair.encoder, enc_trace, g_latent, input_grad=False)
    return loss, pair.encoder._like(gw_e, gb_e), pair.decoder._like(gw_d, gb_d)


def reconstruction_loss(pair: AutoencoderPair, data) -> float:
    x = np.asarray(data, dtype=np.float64)
    diff = pair.decode(pair.encode(x)) - x
    return float(np.sum(diff * diff) / x.shape[0])


def reverse_reconstruction_loss(pair: AutoencoderPair, sequence) -> float:
    x = np.asarray(sequence, dtype=np.float64)
    diff = pair.decode(pair.encode(x)[::-1]) - x
    return float(np.sum(diff * diff) / x.shape[0])


def _reverse_schedule(labels: np.ndarray, rng, batch_size: int):
    """Pick a class with >= 2 samples and chunk its shuffled indices into batches."""
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    if eligible.size == 0:
        return None, []
    c = int(rng.choice(eligible))
    seq = rng.permutation(np.flatnonzero(labels == c))
    return c, [seq[i:i + batch_size] for i in range(0, len(seq), batch_size)]


def train_autoencoder(
    shard: ClientShard,
    *,
    latent_dim: int = 32,
    hidden: int = 128,
    epochs: int = 200,
    batch_size: int = 64,
    learning_rate: float = 0.01,
    momentum: float = 0.5,
    seed: int = 0,
    max_samples: int | None = None,
) -> tuple[AutoencoderPair, AutoencoderHistory]:
    """Minimize forward plus reverse-order reconstruction loss on the client's data.

    Each epoch draws one class; its samples in shuffled order form the ordered
    sequence for the reverse term, chunked to ``batch_size``.  Step ``b`` of
    the epoch adds the reverse term of chunk ``b`` (while chunks last) to the
    plain term of mini-batch ``b``.  ``max_samples`` caps the rows used per
    epoch (a seeded subsample) to bound cost on large shards.
    """
    data = shard.data
    if len(data) == 0:
        raise ValidationError(f"client {shard.client_id}: empty shard")
    x_all = data.features
    pair = init_autoencoder(data.dim, latent_dim, hidden, seed)
    enc_opt = OptimizerState.fresh(pair.encoder, learning_rate, momentum)
    dec_opt = OptimizerState.fresh(pair.decoder, learning_rate, momentum)
    history = AutoencoderHistory(initial_l1=reconstruction_loss(pair, x_all), final_l1=float("nan"))
    n = len(data)
    for epoch in range(epochs):
        rng = seeding.make_rng(seed, seeding.AUTOENCODER, epoch)
        order = rng.permutation(n)
        if max_samples is not None and n > max_samples:
            order = order[:max_samples]
        cls, chunks = _reverse_schedule(data.labels, rng, batch_size)
        history.reverse_classes.append(cls)
        l1_sum = l2_sum = 0.0
        n_b = n_r = 0
        for b, start in enumerate(range(0, len(order), batch_size)):
            batch = x_all[order[start:start + batch_size]]
            loss1, ge, gd = _grads(pair, batch, reverse=False)
            l1_sum += loss1
            n_b += 1
            if b < len(chunks):
                chunk = chunks[b]
                if len(chunk) >= 2:
                    loss2, ge2, gd2 = _grads(pair, x_all[chunk], reverse=True)
                    ge, gd = ge.add(ge2), gd.add(gd2)
                    l2_sum += loss2
                    n_r += 1
                else:
                    history.skipped_l2_batches += 1
                    log.debug("client %s epoch %d: reverse chunk of length %d skipped",
                              shard.client_id, epoch, len(chunk))
            enc, enc_opt = sgd_step(pair.encoder, ge, enc_opt)
            dec, dec_opt = sgd_step(pair.decoder, gd, dec_opt)
            pair = AutoencoderPair(enc, dec)
        history.epoch_l1.append(l1_sum / max(n_b, 1))
        history.epoch_l2.append(l2_sum / n_r if n_r else float("nan"))
    history.final_l1 = reconstruction_loss(pair, x_all)
    if not history.final_l1 < history.initial_l1:
        log.warning("client %s: autoencoder reconstruction did not improve (%.4g -> %.4g)",
                    shard.client_id, history.initial_l1, history.final_l1)
    return pair, history
