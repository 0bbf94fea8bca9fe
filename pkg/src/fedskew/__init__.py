"""Federated learning, client unlearning and skewed-class recovery at desk scale."""

from .data import ClientShard, LabeledDataset, PartitionSpec, gen_synthetic, load_idx, partition_skewed
from .fed import EvalReport, FedRoundConfig, aggregate, evaluate, local_train, run_federated
from .nn import ModelParams, OptimizerState, forward, init_mlp, loss_and_grad, predict, sgd_step
from .unlearn import UnlearnConfig, projection, upga_unlearn

__version__ = "0.1.0"
