"""Skewed-class recovery: autoencoder, latent SMOTE, density denoising, fine-tuning."""

from .autoencoder import (
    AutoencoderHistory,
    AutoencoderPair,
    init_autoencoder,
    reconstruction_loss,
    reverse_reconstruction_loss,
    train_autoencoder,
)
from .density import DensityReport, denoise, density, density_factor, pool_densities
from .oversample import GeneratedBatch, latent_smote, nearest_neighbors
from .recover import (
    VARIANTS,
    AugmentedShard,
    ClientAugmentation,
    RecoveryConfig,
    RecoveryResult,
    augment_client,
    augment_clients,
    build_shard,
    imba_ulrc_recover,
    recover_variant,
    target_count,
)
