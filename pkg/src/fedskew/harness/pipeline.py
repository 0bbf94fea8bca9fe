"""Pre-train, unlearn, recover and evaluate; plus the ablation and k sweeps built on the same cells."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .. import seeding
from ..checkpoint import atomic_write_bytes, load_checkpoint, to_bytes
from ..data import LabeledDataset, Partition, PartitionSpec, gen_synthetic, load_idx, partition_skewed, split_per_class
from ..errors import StageError, ValidationError
from ..fed import EvalReport, evaluate, metrics_csv, run_federated
from ..nn import ModelParams, init_mlp
from ..recovery.recover import ClientAugmentation, RecoveryConfig, augment_clients, recover_variant
from ..unlearn import UnlearnConfig, upga_unlearn
from .config import ExperimentConfig, dump_config
from .report import mean_std, sha256_bytes, sha256_file, write_csv, write_json

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1

_DATA_CACHE: dict[tuple, tuple[LabeledDataset, LabeledDataset, str]] = {}


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset, str]:
    """(train, test, content digest of the inputs); cached per dataset section."""
    ds = cfg.dataset
    key = tuple(sorted(dataclasses.asdict(ds).items()))
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if ds.kind == "idx":
        paths = (ds.train_images, ds.train_labels, ds.test_images, ds.test_labels)
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels, class_count=train.class_count)
        digest = sha256_bytes("\n".join(sha256_file(p) for p in paths).encode())
    else:
        full = gen_synthetic(ds.class_count, ds.per_class + ds.test_per_class, ds.dim, ds.cluster_std, ds.data_seed)
        train, test = split_per_class(full, ds.test_per_class, ds.data_seed)
        digest = sha256_bytes(repr(key).encode())
    _DATA_CACHE[key] = (train, test, digest)
    return train, test, digest


def input_hash(cfg: ExperimentConfig, data_digest: str, seed: int) -> str:
    """Content hash over everything that determines the metrics (not output paths or threads)."""
    d = cfg.to_dict()
    for volatile in ("output_dir", "threads", "seed"):
        d.pop(volatile)
    return sha256_bytes(json.dumps({"config": d, "data": data_digest, "seed": seed}, sort_keys=True).encode())


@dataclass(frozen=True)
class StageSeeds:
    partition: int
    init: int
    pretrain: int
    unlearn: int
    recovery: int
    finetune: int

    @classmethod
    def from_master(cls, seed: int) -> "StageSeeds":
        return cls(
            partition=seed,
            init=seeding.derive_seed(seed, seeding.INIT),
            pretrain=seeding.derive_seed(seed, seeding.LOCAL, 0),
            unlearn=seeding.derive_seed(seed, seeding.UNLEARN),
            recovery=seeding.derive_seed(seed, seeding.AUTOENCODER),
            finetune=seeding.derive_seed(seed, seeding.LOCAL, 1),
        )


def _stage(name: str, fn: Callable):
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name attached
        raise StageError(name, exc) from exc


@dataclass
class Cell:
    """Everything up to and including unlearning for one (alpha, seed)."""

    alpha: float
    seed: int
    partition: Partition
    global_model: ModelParams
    unlearned: ModelParams
    pretrain_trace: list[EvalReport]
    pretrain_eval: EvalReport
    unlearn_eval: EvalReport
    unlearn_trace: dict
    global_sha256: str
    unlearned_sha256: str
    wall_times: dict = field(default_factory=dict)

    @property
    def skewed_class(self) -> int:
        return self.partition.skewed_class

    @property
    def remaining(self):
        return self.partition.shards[1:]


def recovery_config(cfg: ExperimentConfig, seed: int) -> RecoveryConfig:
    seeds = StageSeeds.from_master(seed)
    return dataclasses.replace(cfg.recovery, seed=seeds.recovery,
                               fed=dataclasses.replace(cfg.recovery.fed, seed=seeds.finetune))


def prepare_cell(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset, alpha: float,
                 seed: int, *, threads: int = 1, out_dir: Path | None = None) -> Cell:
    """Partition, pre-train with all clients, then unlearn client 0.

    With ``out_dir`` the partition manifest and both checkpoints are written as
    soon as each stage finishes.
    """
    seeds = StageSeeds.from_master(seed)
    times = {}

    t0 = time.perf_counter()
    spec = PartitionSpec(cfg.partition.client_count, alpha, cfg.partition.skewed_class, 0, seeds.partition)
    part = _stage("partition", lambda: partition_skewed(train, spec))
    times["partition"] = time.perf_counter() - t0
    if out_dir is not None:
        part.write_manifest(out_dir / "partition.json")
    sk = part.skewed_class

    t0 = time.perf_counter()
    init = init_mlp([train.dim, cfg.model.hidden, train.class_count], seed=seeds.init,
                    dropout_rate=cfg.model.dropout)
    pre_cfg = dataclasses.replace(cfg.pretrain, seed=seeds.pretrain)
    global_model, pre_trace = _stage("pretrain", lambda: run_federated(
        part.shards, pre_cfg, init, test=test, skewed_class=sk, threads=threads))
    times["pretrain"] = time.perf_counter() - t0
    g_bytes = to_bytes(global_model)
    if out_dir is not None:
        atomic_write_bytes(out_dir / "global.frsm", g_bytes)

    t0 = time.perf_counter()
    u = cfg.unlearn
    ucfg = UnlearnConfig(reference=global_model, ascent_steps=u.ascent_steps, ascent_lr=u.ascent_lr,
                         radius=u.radius, radius_scale=u.radius_scale, batch_size=u.batch_size,
                         seed=seeds.unlearn)
    unlearned, utrace = _stage("unlearn", lambda: upga_unlearn(global_model, part.shards[0], ucfg,
                                                               return_trace=True))
    times["unlearn"] = time.perf_counter() - t0
    u_bytes = to_bytes(unlearned)
    if out_dir is not None:
        atomic_write_bytes(out_dir / "unlearned.frsm", u_bytes)

    return Cell(
        alpha=alpha, seed=seed, partition=part, global_model=global_model, unlearned=unlearned,
        pretrain_trace=pre_trace,
        pretrain_eval=evaluate(global_model, test, sk, cfg.eval_batch_size),
        unlearn_eval=evaluate(unlearned, test, sk, cfg.eval_batch_size),
        unlearn_trace=utrace.to_dict(),
        global_sha256=sha256_bytes(g_bytes), unlearned_sha256=sha256_bytes(u_bytes),
        wall_times=times,
    )


def _augmentation_manifest(augs: Sequence[ClientAugmentation]) -> list[dict]:
    out = []
    for a in augs:
        entry = {"client_id": a.shard.client_id, "target_count": a.target_count,
                 "original_skew_count": a.shard.class_count_of(a.skewed_class),
                 "generated_count": 0 if a.batch is None else len(a.batch), "skipped": a.skipped}
        if a.history is not None:
            entry["autoencoder"] = {"initial_l1": a.history.initial_l1, "final_l1": a.history.final_l1,
                                    "epoch_l1": a.history.epoch_l1, "epoch_l2": a.history.epoch_l2,
                                    "reverse_classes": a.history.reverse_classes,
                                    "skipped_l2_batches": a.history.skipped_l2_batches}
        if a.batch is not None:
            entry["smote"] = {"source_index": a.batch.source_index, "neighbor_index": a.batch.neighbor_index,
                              "rand_t": a.batch.rand_t}
        out.append(entry)
    return out


def _metrics_table(cell: Cell, recovery_trace: Sequence[EvalReport], client_count: int) -> str:
    parts = [
        metrics_csv(cell.pretrain_trace, client_count, stage="pretrain"),
        metrics_csv([cell.unlearn_eval], 1, stage="unlearn"),
        metrics_csv(recovery_trace, client_count - 1, stage="recovery"),
    ]
    head, *_ = parts[0].splitlines(keepends=True)
    return head + "".join(p.split("\n", 1)[1] for p in parts)


def run_pipeline(cfg: ExperimentConfig, *, seed: int | None = None, variant: str | None = None,
                 out_dir=None, threads: int | None = None) -> dict:
    """One full run at ``cfg.partition.alpha``; returns the JSON-ready run report."""
    seed = cfg.seed if seed is None else seed
    variant = variant or cfg.variant
    threads = cfg.threads if threads is None else threads
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test, digest = load_datasets(cfg)
    echo = dataclasses.replace(cfg, seed=seed, variant=variant, threads=threads, output_dir=str(out))
    atomic_write_bytes(out / "config.yaml", dump_config(echo).encode())
    report = {
        "schema": REPORT_SCHEMA, "seed": seed, "variant": variant, "alpha": cfg.partition.alpha,
        "input_hash": input_hash(echo, digest, seed), "config": echo.to_dict(), "stages": {},
        "wall_time_s": {}, "artifacts": {}, "status": "running",
    }
    try:
        cell = prepare_cell(cfg, train, test, cfg.partition.alpha, seed, threads=threads, out_dir=out)
        report["skewed_class"] = cell.skewed_class
        report["wall_time_s"].update(cell.wall_times)
        report["stages"]["pretrain"] = {"final": cell.pretrain_eval.to_dict(),
                                        "aggregation_weights": [len(s) for s in cell.partition.shards],
                                        "rounds": [r.to_dict() for r in cell.pretrain_trace]}
        report["stages"]["unlearn"] = {"final": cell.unlearn_eval.to_dict(), "trace": cell.unlearn_trace}

        rcfg = recovery_config(cfg, seed)
        t0 = time.perf_counter()
        augs = None
        if variant != "plain_finetune":
            augs = _stage("augment", lambda: augment_clients(cell.remaining, cell.skewed_class, rcfg, threads))
            write_json(out / "augmentation.json", _augmentation_manifest(augs))
        result = _stage("recover", lambda: recover_variant(
            cell.unlearned, cell.remaining, rcfg, variant, skewed_class=cell.skewed_class, test=test,
            augmentations=augs, threads=threads))
        report["wall_time_s"]["recover"] = time.perf_counter() - t0
        atomic_write_bytes(out / "recovered.frsm", to_bytes(result.model))
        write_json(out / "recovery_shards.json", result.manifests())
        report["stages"]["recovery"] = {"variant": variant, "final": result.trace[-1].to_dict(),
                                        "aggregation_weights": [len(s.shard) for s in result.shards],
                                        "rounds": [r.to_dict() for r in result.trace]}
        atomic_write_bytes(out / "metrics.csv",
                           _metrics_table(cell, result.trace, cfg.partition.client_count).encode())
        report["status"] = "ok"
    except StageError as exc:
        report["status"] = "failed"
        report["failed_stage"] = exc.stage
        report["error"] = str(exc.cause)
        raise
    finally:
        for name in ("partition.json", "global.frsm", "unlearned.frsm", "augmentation.json",
                     "recovery_shards.json", "recovered.frsm", "metrics.csv", "config.yaml"):
            if (out / name).is_file():
                report["artifacts"][name] = {"path": name, "sha256": sha256_file(out / name)}
        write_json(out / "report.json", report)
    return report


@dataclass
class CellStudy:
    """Final evaluations of several recovery runs that share one unlearned model."""

    cell: Cell
    variants: dict[str, EvalReport] = field(default_factory=dict)
    k_sweep: dict[int, EvalReport] = field(default_factory=dict)
    consumed_sha256: dict[str, str] = field(default_factory=dict)
    wall_times: dict[str, float] = field(default_factory=dict)

    def pipeline_seconds(self, variant: str = "rt_smote_denoise") -> float:
        """Wall time of one full pipeline run: pre-training through one recovery variant."""
        t = sum(self.cell.wall_times.values()) + self.wall_times[f"recover:{variant}"]
        return t + (self.wall_times.get("augment", 0.0) if variant != "plain_finetune" else 0.0)


def study_cell(cfg: ExperimentConfig, train: LabeledDataset, test: LabeledDataset, alpha: float, seed: int,
               *, variants: Sequence[str] = (), k_values: Sequence[int] = (), threads: int = 1,
               out_dir: Path | None = None) -> CellStudy:
    """Run each variant and each denoise k on the same unlearned model and generated samples."""
    cell = prepare_cell(cfg, train, test, alpha, seed, threads=threads, out_dir=out_dir)
    study = CellStudy(cell)
    rcfg = recovery_config(cfg, seed)
    needs_aug = bool(k_values) or any(v != "plain_finetune" for v in variants)
    augs = None
    if needs_aug:
        t0 = time.perf_counter()
        augs = _stage("augment", lambda: augment_clients(cell.remaining, cell.skewed_class, rcfg, threads))
        study.wall_times["augment"] = time.perf_counter() - t0
        if out_dir is not None:
            write_json(out_dir / "augmentation.json", _augmentation_manifest(augs))

    def run(variant: str, k: int, label: str) -> EvalReport:
        # hash the model actually handed to recovery, to back the fairness check
        study.consumed_sha256[label] = sha256_bytes(to_bytes(cell.unlearned))
        t0 = time.perf_counter()
        res = _stage("recover", lambda: recover_variant(
            cell.unlearned, cell.remaining, rcfg, variant, skewed_class=cell.skewed_class,
            augmentations=augs, denoise_k=k, threads=threads))
        study.wall_times[label] = time.perf_counter() - t0
        return evaluate(res.model, test, cell.skewed_class, cfg.eval_batch_size)

    for v in variants:
        study.variants[v] = run(v, rcfg.denoise_k, f"recover:{v}")
        log.info("alpha=%s seed=%d %s skewed=%.4f", alpha, seed, v, study.variants[v].skewed_class_accuracy)
    for k in k_values:
        if k == rcfg.denoise_k and "rt_smote_denoise" in study.variants:
            study.k_sweep[k] = study.variants["rt_smote_denoise"]
        else:
            study.k_sweep[k] = run("rt_smote_denoise", k, f"recover:k={k}")
        log.info("alpha=%s seed=%d k=%d skewed=%.4f", alpha, seed, k, study.k_sweep[k].skewed_class_accuracy)
    return study


def _cell_dir(out: Path, alpha: float, seed: int) -> Path:
    d = out / "cells" / f"alpha_{alpha:g}" / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def run_studies(cfg: ExperimentConfig, *, variants: Sequence[str], k_values: Sequence[int],
                seeds: Sequence[int] | None = None, out_dir=None, threads: int | None = None
                ) -> list[CellStudy]:
    seeds = list(cfg.seeds if seeds is None else seeds)
    threads = cfg.threads if threads is None else threads
    out = Path(out_dir or cfg.output_dir)
    train, test, _ = load_datasets(cfg)
    studies = []
    for alpha in cfg.alphas:
        for seed in seeds:
            studies.append(study_cell(cfg, train, test, alpha, seed, variants=variants, k_values=k_values,
                                      threads=threads, out_dir=_cell_dir(out, alpha, seed)))
    return studies


ABLATION_HEADER = ["alpha", "variant", "seeds", "skewed_acc_mean", "skewed_acc_std", "balanced_acc_mean",
                   "balanced_acc_std", "overall_acc_mean", "overall_acc_std", "unlearned_sha256"]


def ablation_rows(cfg: ExperimentConfig, studies: Sequence[CellStudy], variants: Sequence[str]) -> list[list]:
    rows = []
    for alpha in cfg.alphas:
        group = [s for s in studies if s.cell.alpha == alpha]
        for s in group:
            consumed = set(s.consumed_sha256.values())
            if consumed != {s.cell.unlearned_sha256}:
                raise ValidationError(f"alpha={alpha} seed={s.cell.seed}: variants saw different unlearned models")
        for v in variants:
            reps = [s.variants[v] for s in group]
            sk = mean_std([r.skewed_class_accuracy for r in reps])
            bal = mean_std([r.balanced_accuracy for r in reps])
            ov = mean_std([r.overall_accuracy for r in reps])
            rows.append([alpha, v, len(group), *sk, *bal, *ov,
                         ";".join(s.cell.unlearned_sha256 for s in group)])
    return rows


def run_ablation(cfg: ExperimentConfig, *, out_dir=None, threads: int | None = None,
                 seeds: Sequence[int] | None = None) -> list[list]:
    """Every variant at every alpha, each alpha/seed sharing one unlearned model; writes ablation.csv."""
    out = Path(out_dir or cfg.output_dir)
    studies = run_studies(cfg, variants=cfg.variants, k_values=(), seeds=seeds, out_dir=out, threads=threads)
    rows = ablation_rows(cfg, studies, cfg.variants)
    write_csv(out / "ablation.csv", ABLATION_HEADER, rows)
    runs = []
    for s in studies:
        c = s.cell
        runs.append([c.alpha, c.seed, c.skewed_class, "pretrained", c.pretrain_eval.skewed_class_accuracy,
                     c.pretrain_eval.balanced_accuracy, c.pretrain_eval.overall_accuracy, c.global_sha256])
        runs.append([c.alpha, c.seed, c.skewed_class, "unlearned", c.unlearn_eval.skewed_class_accuracy,
                     c.unlearn_eval.balanced_accuracy, c.unlearn_eval.overall_accuracy, c.unlearned_sha256])
        for v, r in s.variants.items():
            runs.append([c.alpha, c.seed, c.skewed_class, v, r.skewed_class_accuracy, r.balanced_accuracy,
                         r.overall_accuracy, c.unlearned_sha256])
    write_csv(out / "ablation_runs.csv", ["alpha", "seed", "skewed_class", "model", "skewed_acc",
                                          "balanced_acc", "overall_acc", "unlearned_sha256"], runs)
    return rows


KSWEEP_HEADER = ["k", "alpha", "skewed_acc_mean", "skewed_acc_std", "seeds"]


def ksweep_rows(cfg: ExperimentConfig, studies: Sequence[CellStudy]) -> list[list]:
    rows = []
    for alpha in cfg.alphas:
        group = [s for s in studies if s.cell.alpha == alpha]
        for k in cfg.k_values:
            mean, std = mean_std([s.k_sweep[k].skewed_class_accuracy for s in group])
            rows.append([k, alpha, mean, std, len(group)])
    return rows


def run_ksweep(cfg: ExperimentConfig, *, out_dir=None, threads: int | None = None,
               seeds: Sequence[int] | None = None) -> list[list]:
    """Denoised recovery for every k at every alpha; writes ksweep.csv (k, alpha, accuracy)."""
    out = Path(out_dir or cfg.output_dir)
    studies = run_studies(cfg, variants=(), k_values=cfg.k_values, seeds=seeds, out_dir=out, threads=threads)
    rows = ksweep_rows(cfg, studies)
    write_csv(out / "ksweep.csv", KSWEEP_HEADER, rows)
    runs = [[k, s.cell.alpha, s.cell.seed, r.skewed_class_accuracy, r.balanced_accuracy, r.overall_accuracy]
            for s in studies for k, r in s.k_sweep.items()]
    write_csv(out / "ksweep_runs.csv", ["k", "alpha", "seed", "skewed_acc", "balanced_acc", "overall_acc"], runs)
    return rows


def evaluate_checkpoint(path, test: LabeledDataset, skewed_class: int | None,
                        batch_size: int = 128) -> EvalReport:
    return evaluate(load_checkpoint(path), test, skewed_class, batch_size)


def partition_only(cfg: ExperimentConfig, *, seed: int | None = None, out_dir=None) -> Partition:
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _, _ = load_datasets(cfg)
    p = cfg.partition
    part = partition_skewed(train, PartitionSpec(p.client_count, p.alpha, p.skewed_class, 0,
                                                 StageSeeds.from_master(seed).partition))
    part.write_manifest(out / "partition.json")
    return part


__all__ = [
    "Cell", "CellStudy", "StageSeeds", "ablation_rows", "evaluate_checkpoint",
    "input_hash", "ksweep_rows", "load_datasets", "partition_only", "prepare_cell", "recovery_config",
    "run_ablation", "run_ksweep", "run_pipeline", "run_studies", "study_cell",
]
