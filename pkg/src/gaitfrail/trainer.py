"""Per-fold training loop: constant-rate decoupled-weight-decay Adam over the
trainable groups only, periodic held-out evaluation, end-of-run checkpointing.

The reference path is single-threaded and fully deterministic given the seed:
batch composition, clip sampling, and augmentation all draw from one numpy
generator in a fixed order, and model initialization uses a torch generator
derived from the same seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbones import (
    BackboneConfig,
    apply_freeze,
    build_backbone,
    freeze_config,
    save_checkpoint,
    trainable_parameters,
)
from .backbones.freeze import FreezeConfig
from .clips import AugmentPolicy, augment, sample_eval_clip, sample_training_clip
from .data import DatasetManifest, GaitSequence, load_sequence
from .metrics import EvalReport, PredictionSet, aggregate_folds, evaluate_predictions
from .objective import (
    ClassWeights,
    FrailtyHead,
    FrailtyModel,
    LossConfig,
    inverse_sqrt_weights,
    joint_loss,
)


class TrainingError(Exception):
    """Non-finite loss or other unrecoverable numeric failure."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 4
    clip_length: int = 60
    frame_skip: int = 3
    eval_clip_length: int = 80
    total_iterations: int = 10_000
    eval_interval: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weighting: bool = False
    part_count: int = 4
    embed_dim: int = 64
    margin: float = 0.2
    lambda_ce: float = 1.0
    lambda_triplet: float = 1.0
    seed: int = 0
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self) -> None:
        for name in ("learning_rate", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("batch_size", "clip_length", "frame_skip", "eval_clip_length",
                     "total_iterations", "eval_interval", "part_count", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_iterations % self.eval_interval != 0:
            raise ValueError(
                f"eval_interval {self.eval_interval} must divide total_iterations "
                f"{self.total_iterations}"
            )


@dataclass
class TrajectoryPoint:
    iteration: int
    micro_auc: float
    weighted_kappa: float
    ce: float
    triplet: float
    total: float


@dataclass
class TrainTrajectory:
    points: list[TrajectoryPoint]
    final_report: EvalReport
    final_predictions: PredictionSet
    checkpoint_path: Path | None = None

    def best_point(self) -> TrajectoryPoint:
        return max(self.points, key=lambda p: p.micro_auc)


def build_model(backbone_cfg: BackboneConfig, train_cfg: TrainConfig) -> FrailtyModel:
    backbone = build_backbone(backbone_cfg, init_seed=train_cfg.seed)
    head = FrailtyHead(
        in_channels=backbone.out_channels,
        feature_height=backbone.feature_grid[0],
        part_count=train_cfg.part_count,
        embed_dim=train_cfg.embed_dim,
        init_seed=train_cfg.seed + 1,
    )
    return FrailtyModel(backbone, head)


def make_optimizer(model: FrailtyModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        trainable_parameters(model),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def group_state_hashes(model: FrailtyModel) -> dict[str, str]:
    """SHA-256 over each group's parameters and buffers, for freeze auditing."""
    out = {}
    for name, module in model.groups.items():
        digest = hashlib.sha256()
        for _, tensor in sorted(module.state_dict().items()):
            digest.update(tensor.detach().cpu().numpy().tobytes())
        out[name] = digest.hexdigest()
    return out


def load_sequences(manifest: DatasetManifest, ids) -> dict[str, GaitSequence]:
    return {pid: load_sequence(manifest, pid) for pid in sorted(ids)}


def _batch_tensor(clips) -> torch.Tensor:
    arr = np.ascontiguousarray(np.stack([c.frames for c in clips]))
    return torch.from_numpy(arr)


def evaluate_participants(
    model: FrailtyModel,
    sequences: dict[str, GaitSequence],
    ids,
    eval_clip_length: int,
) -> PredictionSet:
    """One deterministic eval clip per participant -> one probability vector each."""
    model.eval()
    pids = sorted(ids)
    probs = np.zeros((len(pids), 3), dtype=np.float64)
    labels = np.zeros(len(pids), dtype=np.int64)
    with torch.no_grad():
        for i, pid in enumerate(pids):
            clip = sample_eval_clip(sequences[pid], eval_clip_length)
            logits, _, _ = model(_batch_tensor([clip]))
            probs[i] = torch.softmax(logits[0], dim=0).numpy()
            labels[i] = int(clip.label)
    probs = probs / probs.sum(axis=1, keepdims=True)
    return PredictionSet(pids, probs, labels)


def train_fold(
    fold: tuple[set, set],
    manifest: DatasetManifest,
    train_cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    freeze_cfg: FreezeConfig,
    rng: np.random.Generator | None = None,
    fold_index: int = 0,
    sequences: dict[str, GaitSequence] | None = None,
    out_dir: str | Path | None = None,
    log_every: int = 0,
) -> tuple[TrainTrajectory, FrailtyModel]:
    """Train one fold to completion and evaluate every eval_interval iterations."""
    train_ids, test_ids = sorted(fold[0]), sorted(fold[1])
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(train_cfg.seed))
    if sequences is None:
        sequences = load_sequences(manifest, list(train_ids) + list(test_ids))

    model = build_model(backbone_cfg, train_cfg)
    apply_freeze(model, freeze_cfg)
    optimizer = make_optimizer(model, train_cfg)

    if train_cfg.class_weighting:
        labels_by_id = manifest.labels_by_id()
        counts = [sum(1 for pid in train_ids if labels_by_id[pid] == c) for c in range(3)]
        weights: ClassWeights | None = inverse_sqrt_weights(counts)
    else:
        weights = None
    loss_cfg = LossConfig(
        margin=train_cfg.margin,
        lambda_ce=train_cfg.lambda_ce,
        lambda_triplet=train_cfg.lambda_triplet,
        class_weights=weights,
    )

    points: list[TrajectoryPoint] = []
    for iteration in range(1, train_cfg.total_iterations + 1):
        model.train()
        chosen = rng.choice(len(train_ids), size=train_cfg.batch_size, replace=True)
        batch_clips = []
        for idx in chosen:
            clip = sample_training_clip(
                sequences[train_ids[int(idx)]], train_cfg.clip_length, train_cfg.frame_skip, rng
            )
            batch_clips.append(augment(clip, train_cfg.augment_policy, rng))
        clips_t = _batch_tensor(batch_clips)
        labels_t = torch.tensor([int(c.label) for c in batch_clips], dtype=torch.int64)

        fm = model.backbone(clips_t)
        total, breakdown = joint_loss(fm, labels_t, model.head, loss_cfg)
        if not np.isfinite(breakdown.total):
            raise TrainingError(
                f"non-finite loss at iteration {iteration}: ce={breakdown.ce}, "
                f"triplet={breakdown.triplet}, total={breakdown.total}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        if log_every and iteration % log_every == 0:
            print(f"iter {iteration}: total={breakdown.total:.4f} ce={breakdown.ce:.4f} "
                  f"tri={breakdown.triplet:.4f}", flush=True)

        if iteration % train_cfg.eval_interval == 0:
            preds = evaluate_participants(model, sequences, test_ids, train_cfg.eval_clip_length)
            report = evaluate_predictions(preds, fold_index=fold_index)
            points.append(TrajectoryPoint(
                iteration=iteration,
                micro_auc=report.micro_auc,
                weighted_kappa=report.weighted_kappa,
                ce=breakdown.ce,
                triplet=breakdown.triplet,
                total=breakdown.total,
            ))

    final_preds = evaluate_participants(model, sequences, test_ids, train_cfg.eval_clip_length)
    final_report = evaluate_predictions(final_preds, fold_index=fold_index)
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / f"checkpoint_fold{fold_index}.npz"
        save_checkpoint(
            checkpoint_path,
            {"backbone": model.backbone, "head": model.head},
            fingerprint=backbone_cfg.fingerprint(),
        )
        write_trajectory_csv(points, out_dir / f"trajectory_fold{fold_index}.csv")
    trajectory = TrainTrajectory(
        points=points,
        final_report=final_report,
        final_predictions=final_preds,
        checkpoint_path=checkpoint_path,
    )
    return trajectory, model


def write_trajectory_csv(points: list[TrajectoryPoint], path: str | Path) -> None:
    lines = ["iteration,micro_auc,weighted_kappa,ce,triplet,total"]
    for p in points:
        lines.append(
            f"{p.iteration},{p.micro_auc:.6f},{p.weighted_kappa:.6f},"
            f"{p.ce:.6f},{p.triplet:.6f},{p.total:.6f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    backbone_cfg: BackboneConfig
    freeze_name: str
    class_weighting: bool = False


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    fold_reports: list[EvalReport]
    best_points: list[TrajectoryPoint]
    failures: list[str]

    def summary(self) -> dict[str, tuple[float, float]]:
        return aggregate_folds(self.fold_reports)


def run_experiment(
    manifest: DatasetManifest,
    fold_plan,
    grid: list[ExperimentSpec],
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> list[ExperimentResult]:
    """Train every grid entry on every fold; failures are recorded, not swallowed."""
    sequences = load_sequences(manifest, manifest.participant_ids())
    results = []
    for spec in grid:
        cfg = replace(train_cfg, class_weighting=spec.class_weighting)
        fold_reports: list[EvalReport] = []
        best_points: list[TrajectoryPoint] = []
        failures: list[str] = []
        for fold_index, fold in enumerate(fold_plan.folds):
            try:
                trajectory, _ = train_fold(
                    fold, manifest, cfg, spec.backbone_cfg, freeze_config(spec.freeze_name),
                    rng=np.random.Generator(np.random.PCG64(cfg.seed + fold_index)),
                    fold_index=fold_index,
                    sequences=sequences,
                    out_dir=None if out_dir is None else Path(out_dir) / spec.name,
                )
            except TrainingError as exc:
                failures.append(f"fold {fold_index}: {exc}")
                continue
            fold_reports.append(trajectory.final_report)
            best_points.append(trajectory.best_point())
        results.append(ExperimentResult(spec, fold_reports, best_points, failures))
    return results


def format_report_table(rows: list[tuple[str, tuple[float, float], tuple[float, float]]]) -> str:
    """Rows of (experiment, (auc mean, std), (kappa mean, std)) -> aligned text table."""
    header = f"{'Experiment':<28}{'Micro AUC':>20}{'Cohen Kappa':>20}"
    lines = [header, "-" * len(header)]
    for name, auc, kappa in rows:
        lines.append(
            f"{name:<28}{auc[0]:>11.4f} ± {auc[1]:.4f}{kappa[0]:>13.4f} ± {kappa[1]:.4f}"
        )
    return "\n".join(lines)
