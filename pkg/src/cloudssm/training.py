"""Optimization loop: Adam, per-iteration input resampling, early stopping on
validation Chamfer distance, checkpointing and single-shape inference.

Runs are deterministic under fixed seeds: data sampling comes from one numpy
generator, parameter init from the model seed, and validation inputs use
farthest-point sampling so early stopping is not noise-driven.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .geometry import (
    Cohort,
    NormalizationParams,
    PointCloud,
    denormalize,
    farthest_point_sample,
    normalize_points,
)
from .losses import LossConfig, chamfer_distance, correspondence_loss_terms
from .model import ModelConfig, NumericalDivergenceError, build_model

MAX_TARGET_POINTS = 5000  # loss targets are FPS-truncated beyond this


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; message carries diagnostics."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    patience_epochs: int = 100
    max_epochs: int = 5000
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_cd: float


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[EpochRecord]
    best_epoch: int
    best_val_cd: float


@dataclass
class CorrespondenceSet:
    """Ordered output points for one shape; index i means the same locus on
    every shape of a cohort."""

    shape_id: str
    points: np.ndarray  # (M, 3), mm


def split_cohort(cohort: Cohort, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Cohort:
    """Random seed-deterministic train/val/test partition.

    Rounding floors val/test but guarantees each at least one shape.
    """
    n = len(cohort)
    if n < 3:
        raise ValueError("cohort too small to split (need >= 3 shapes)")
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("ratios must be three values summing to 1")
    n_val = max(1, int(n * ratios[1]))
    n_test = max(1, int(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError("split leaves no training shapes")
    order = np.random.default_rng(seed).permutation(n)
    labels = {}
    for pos, idx in enumerate(order):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    shapes = [replace(s, split=labels[i]) for i, s in enumerate(cohort.shapes)]
    return Cohort(shapes, normalization=cohort.normalization)


def _target_tensor(cloud: PointCloud, dtype=torch.float32) -> torch.Tensor:
    pts = cloud
    if pts.count > MAX_TARGET_POINTS:
        pts, _ = farthest_point_sample(pts, MAX_TARGET_POINTS)
    return torch.as_tensor(pts.points, dtype=dtype)


def _fps_input(cloud: PointCloud, n: int, dtype=torch.float32) -> torch.Tensor:
    sub, _ = farthest_point_sample(cloud, min(n, cloud.count))
    return torch.as_tensor(sub.points, dtype=dtype)


def validate(model: torch.nn.Module, inputs: list[torch.Tensor],
             targets: list[torch.Tensor]) -> float:
    """Mean validation Chamfer distance in normalized units.

    Inputs are deterministic (FPS) so the value depends only on the params;
    accumulation order is fixed for reproducibility.
    """
    was_training = model.training
    model.eval()
    values = []
    with torch.no_grad():
        for inp, target in zip(inputs, targets):
            out, _ = model(inp)
            values.append(float(chamfer_distance(out, target)))
    if was_training:
        model.train()
    return float(np.mean(values))


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    cohort: Cohort,
    log_every: int | None = None,
) -> TrainResult:
    """Fit a model on the cohort's train split, early-stopped on val CD.

    Each iteration draws a fresh random N-point input per shape; the loss
    reconstructs the full (possibly corrupted) cloud.  Returns the parameters
    of the best-validation epoch and the per-epoch history.
    """
    train_shapes = cohort.split_shapes("train")
    val_shapes = cohort.split_shapes("val")
    if not train_shapes or not val_shapes:
        raise ValueError("cohort needs non-empty train and val splits")

    clouds = [s.full_cloud() for s in train_shapes]
    for c in clouds:
        if c.count < model_config.n_input:
            raise ValueError(
                f"shape with {c.count} points cannot supply N={model_config.n_input}"
            )
    targets = [_target_tensor(c) for c in clouds]
    points = [torch.as_tensor(c.points, dtype=torch.float32) for c in clouds]
    val_inputs = [
        _fps_input(s.full_cloud(), model_config.n_input) for s in val_shapes
    ]
    val_targets = [_target_tensor(s.full_cloud()) for s in val_shapes]

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(train_config.seed)
    model = build_model(model_config)
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
    )

    history: list[EpochRecord] = []
    best_val = np.inf
    best_epoch = 0
    best_state = None
    since_improvement = 0
    n_input = model_config.n_input

    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_shapes))
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            inputs = torch.stack(
                [
                    points[i][rng.choice(points[i].shape[0], n_input, replace=False)]
                    for i in batch
                ]
            )
            try:
                outputs, _ = model(inputs)
                cd_term, me_term = correspondence_loss_terms(
                    list(outputs), [targets[i] for i in batch], train_config.loss
                )
                loss = cd_term + train_config.loss.alpha * me_term
                if not torch.isfinite(loss):
                    raise NumericalDivergenceError(
                        f"cd={float(cd_term)} me={float(me_term)}"
                    )
            except NumericalDivergenceError as err:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {start // train_config.batch_size}: {err}"
                ) from err
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))

        val_cd = validate(model, val_inputs, val_targets)
        history.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val_cd))
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: train={history[-1].train_loss:.6f} val_cd={val_cd:.6f}")

        if val_cd < best_val:
            best_val = val_cd
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_improvement = 0
        else:
            since_improvement += 1
        if since_improvement >= train_config.patience_epochs:
            break

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, best_val_cd=best_val
    )


def infer(
    model: torch.nn.Module,
    cloud: PointCloud,
    params: NormalizationParams | None = None,
) -> tuple[np.ndarray, torch.Tensor | None, float]:
    """Single forward pass on one shape; returns mm-frame points, the
    correspondence map (None for autoencoders) and the runtime in seconds.

    Raw mm clouds need the training cohort's normalization params; clouds
    larger than the configured N are FPS-subsampled deterministically.
    """
    pts = cloud.points
    if not cloud.normalized:
        if params is None:
            raise ValueError("raw mm input requires normalization params")
        pts = normalize_points(pts, params)
    n_input = model.config.n_input
    work = PointCloud(pts, normalized=False)
    if work.count > n_input:
        work, _ = farthest_point_sample(work, n_input)
    start = time.perf_counter()
    with torch.no_grad():
        out, corr_map = model(torch.as_tensor(work.points, dtype=torch.float32))
    runtime = time.perf_counter() - start
    out_np = out.numpy().astype(np.float64)
    if params is not None:
        out_np = denormalize(out_np, params)
    return out_np, corr_map, runtime


def write_history_csv(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_cd"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_cd)])
