"""Config-driven experiment runs: pipeline, ablation, k sweep, evaluation."""

from .config import ExperimentConfig, config_from_dict, dump_config, load_config
from .pipeline import (
    CellStudy,
    StageSeeds,
    evaluate_checkpoint,
    load_datasets,
    partition_only,
    prepare_cell,
    run_ablation,
    run_ksweep,
    run_pipeline,
    run_studies,
    study_cell,
)
