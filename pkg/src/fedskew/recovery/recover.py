"""Rebalance each remaining client's skewed class, then fine-tune federatedly."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import seeding
from ..data import ClientShard, LabeledDataset
from ..errors import ValidationError
from ..fed import EvalReport, FedRoundConfig, run_federated
from ..nn import ModelParams
from .autoencoder import AutoencoderHistory, AutoencoderPair, train_autoencoder
from .density import DensityReport, denoise
from .oversample import GeneratedBatch, latent_smote

log = logging.getLogger(__name__)

VARIANTS = ("plain_finetune", "rt_smote", "rt_smote_denoise")


@dataclass
class RecoveryConfig:
    latent_dim: int = 32
    ae_hidden: int = 128
    ae_epochs: int = 200
    ae_batch_size: int = 64
    ae_learning_rate: float = 0.002
    ae_momentum: float = 0.5
    ae_max_samples: int | None = None
    smote_k: int = 5
    denoise_k: int = 5
    oversample_factor: float = 2.0
    target_count_rule: str = "match-majority-mean"
    fed: FedRoundConfig = field(default_factory=lambda: FedRoundConfig(global_rounds=10))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.fed, dict):
            self.fed = FedRoundConfig(**self.fed)
        if self.oversample_factor < 1:
            raise ValidationError("oversample_factor must be >= 1")
        if self.denoise_k < 1 or self.smote_k < 1:
            raise ValidationError("denoise_k and smote_k must be >= 1")
        if self.latent_dim < 1 or self.ae_hidden < 1 or self.ae_epochs < 0 or self.ae_batch_size < 1:
            raise ValidationError("autoencoder sizes must be positive")
        if self.target_count_rule != "match-majority-mean":
            raise ValidationError(f"unknown target_count_rule {self.target_count_rule!r}")


def target_count(shard: ClientShard, skewed_class: int) -> int:
    """ceil(mean count of the non-skewed classes) - current skewed count, floored at 0."""
    counts = shard.data.class_counts()
    majority = np.delete(counts, skewed_class)
    if majority.size == 0:
        return 0
    return max(0, math.ceil(majority.mean()) - int(counts[skewed_class]))


@dataclass
class ClientAugmentation:
    """Generation artifacts shared by every variant and every denoise k."""

    shard: ClientShard
    skewed_class: int
    target_count: int
    autoencoder: AutoencoderPair | None = None
    history: AutoencoderHistory | None = None
    batch: GeneratedBatch | None = None
    skipped: str | None = None

    @property
    def original_skew(self) -> np.ndarray:
        return self.shard.data.features[self.shard.data.labels == self.skewed_class]


def augment_client(shard: ClientShard, skewed_class: int, cfg: RecoveryConfig) -> ClientAugmentation:
    """Train the client's autoencoder and draw ``oversample_factor * target`` latent-SMOTE samples."""
    target = target_count(shard, skewed_class)
    aug = ClientAugmentation(shard, skewed_class, target)
    n_skew = shard.class_count_of(skewed_class)
    if n_skew == 0:
        aug.skipped = "no skewed-class samples"
        log.info("client %d has no skewed-class samples; training on raw data", shard.client_id)
        return aug
    if target == 0:
        aug.skipped = "already balanced"
        return aug
    if n_skew < cfg.smote_k + 1:
        raise ValidationError(
            f"client {shard.client_id}: {n_skew} skewed samples, need at least smote_k+1={cfg.smote_k + 1}"
        )
    seed = seeding.derive_seed(cfg.seed, seeding.AUTOENCODER, shard.client_id)
    pair, history = train_autoencoder(
        shard, latent_dim=cfg.latent_dim, hidden=cfg.ae_hidden, epochs=cfg.ae_epochs,
        batch_size=cfg.ae_batch_size, learning_rate=cfg.ae_learning_rate, momentum=cfg.ae_momentum,
        seed=seed, max_samples=cfg.ae_max_samples,
    )
    g = int(math.ceil(cfg.oversample_factor * target))
    batch = latent_smote(pair, aug.original_skew, g, cfg.smote_k,
                         seeding.derive_seed(cfg.seed, seeding.SMOTE, shard.client_id),
                         client_id=shard.client_id)
    aug.autoencoder, aug.history, aug.batch = pair, history, batch
    return aug


def augment_clients(shards: Sequence[ClientShard], skewed_class: int, cfg: RecoveryConfig,
                    threads: int = 1) -> list[ClientAugmentation]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda s: augment_client(s, skewed_class, cfg), shards))
    return [augment_client(s, skewed_class, cfg) for s in shards]


@dataclass
class AugmentedShard:
    shard: ClientShard
    manifest: dict
    report: DensityReport | None = None


def build_shard(aug: ClientAugmentation, variant: str, denoise_k: int) -> AugmentedShard:
    """Merge the generated samples a variant keeps into the client's data."""
    base = aug.shard
    manifest = {
        "client_id": base.client_id,
        "variant": variant,
        "original_skew_count": base.class_count_of(aug.skewed_class),
        "target_count": aug.target_count,
        "generated_count": 0 if aug.batch is None else len(aug.batch),
        "skipped": aug.skipped,
    }
    if variant == "plain_finetune" or aug.batch is None:
        return AugmentedShard(base, manifest)
    report = None
    if variant == "rt_smote":
        kept = aug.batch.samples[: aug.target_count]
        manifest["kept_ids"] = list(range(aug.target_count))
    elif variant == "rt_smote_denoise":
        kept, report = denoise(aug.batch, aug.original_skew, denoise_k, aug.target_count)
        manifest.update(report.to_dict())
    else:
        raise ValidationError(f"unknown variant {variant!r}")
    if aug.history is not None:
        manifest["ae_initial_l1"] = aug.history.initial_l1
        manifest["ae_final_l1"] = aug.history.final_l1
        manifest["ae_reverse_classes"] = aug.history.reverse_classes
    # decoder outputs are unbounded; features live in [0, 1]
    kept = np.clip(kept, 0.0, 1.0)
    data = base.data
    merged = LabeledDataset(
        np.vstack([data.features, kept]),
        np.concatenate([data.labels, np.full(len(kept), aug.skewed_class, dtype=np.int64)]),
        data.class_count,
    )
    shard = ClientShard(
        base.client_id, merged,
        generated_mask=np.concatenate([base.generated_mask, np.ones(len(kept), dtype=bool)]),
        source_index=np.concatenate([base.source_index, np.full(len(kept), -1, dtype=np.int64)]),
    )
    manifest["final_skew_count"] = shard.class_count_of(aug.skewed_class)
    return AugmentedShard(shard, manifest, report)


@dataclass
class RecoveryResult:
    model: ModelParams
    trace: list[EvalReport]
    shards: list[AugmentedShard]
    variant: str

    def manifests(self) -> list[dict]:
        return [s.manifest for s in self.shards]


def recover_variant(
    unlearned: ModelParams,
    shards: Sequence[ClientShard],
    cfg: RecoveryConfig,
    variant: str,
    *,
    skewed_class: int,
    test: LabeledDataset | None = None,
    augmentations: Sequence[ClientAugmentation] | None = None,
    denoise_k: int | None = None,
    threads: int = 1,
) -> RecoveryResult:
    """Run one recovery variant on the remaining clients' shards.

    ``augmentations`` lets several variants (or denoise k values) reuse the
    same autoencoders and generated batches.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    k = cfg.denoise_k if denoise_k is None else denoise_k
    if variant == "plain_finetune":
        built = [AugmentedShard(s, {"client_id": s.client_id, "variant": variant}) for s in shards]
    else:
        if augmentations is None:
            augmentations = augment_clients(shards, skewed_class, cfg, threads)
        if [a.shard.client_id for a in augmentations] != [s.client_id for s in shards]:
            raise ValidationError("augmentations do not match the shards")
        built = [build_shard(a, variant, k) for a in augmentations]
        if all(a.batch is None for a in augmentations):
            log.warning("no client oversampled; recovery reduces to plain fine-tuning")
    model, trace = run_federated([b.shard for b in built], cfg.fed, unlearned,
                                 test=test, skewed_class=skewed_class, threads=threads)
    return RecoveryResult(model, trace, built, variant)


def imba_ulrc_recover(unlearned: ModelParams, shards: Sequence[ClientShard], cfg: RecoveryConfig, *,
                      skewed_class: int, test: LabeledDataset | None = None,
                      threads: int = 1) -> tuple[ModelParams, list[EvalReport]]:
    """Autoencoder, latent SMOTE, density denoising, then federated fine-tuning."""
    result = recover_variant(unlearned, shards, cfg, "rt_smote_denoise", skewed_class=skewed_class,
                             test=test, threads=threads)
    return result.model, result.trace
