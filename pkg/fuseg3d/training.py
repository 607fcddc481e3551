"""Adam training on the soft Dice loss with validation, plateau decay, early stopping and checkpoints."""

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import torch
from torch.optim import Adam
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader

from fuseg3d.core import ModelConfig
from fuseg3d.data import Case, WindowDataset
from fuseg3d.decoder import SegmentationModel
from fuseg3d.errors import ConfigError, DataError, NumericalError
from fuseg3d.evaluation import predict_case
from fuseg3d.io import load_checkpoint, save_checkpoint
from fuseg3d.metrics import binarize, confusion, dice_loss, dsc

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.pt"
LAST_CHECKPOINT = "last.pt"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    `max_steps` counts optimizer steps. Validation runs every `eval_every` steps; the
    learning rate halves (`plateau_factor`) after `plateau_patience` validations without
    improvement, and training stops after `early_stop_patience` of them.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    window_depth: int = 32
    folds: int = 5
    seed: int = 0
    max_steps: int = 500
    eval_every: int = 25
    early_stop_patience: int = 20
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    loss_epsilon: float = 1e-5
    batch_size: int = 1
    inference_stride: Optional[int] = None
    num_workers: int = 0
    prefetch_factor: int = 2
    grad_clip: Optional[float] = None

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if not self.lr > 0:
            raise ConfigError(f"Learning rate must be positive, got {self.lr}")
        for name in ("window_depth", "folds", "max_steps", "eval_every", "batch_size", "prefetch_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.early_stop_patience < 1 or self.plateau_patience < 0:
            raise ConfigError("Patience values out of range")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if not self.loss_epsilon > 0:
            raise ConfigError(f"loss_epsilon must be positive, got {self.loss_epsilon}")
        if self.inference_stride is not None and not 1 <= self.inference_stride <= self.window_depth:
            raise ConfigError(
                f"inference_stride must lie in [1, {self.window_depth}], got {self.inference_stride}"
            )
        if self.num_workers < 0:
            raise ConfigError(f"num_workers must not be negative, got {self.num_workers}")

    @property
    def stride(self) -> int:
        """Stride of overlapping inference windows, half a window unless configured."""
        return self.inference_stride or max(1, self.window_depth // 2)

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> "TrainConfig":
        unknown = set(mapping) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown keys in 'train' section: {sorted(unknown)}")
        return cls(**mapping)


@dataclass
class TrainResult:
    history: list[dict[str, float]] = field(default_factory=list)
    best_val_dsc: float = -math.inf
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None
    steps: int = 0
    stopped_early: bool = False


def model_from_checkpoint(checkpoint: Union[Path, dict[str, Any]]) -> SegmentationModel:
    """Rebuilds a model from a checkpoint file or an already loaded checkpoint."""
    payload = load_checkpoint(checkpoint) if isinstance(checkpoint, Path) else checkpoint
    model = SegmentationModel(ModelConfig.from_dict(payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def validation_dsc(model: SegmentationModel, cases: list[Case], cfg: TrainConfig) -> float:
    """Mean DSC over cases, from stitched full-volume predictions."""
    scores = []
    for case in cases:
        if case.mask is None:
            raise DataError(f"Validation case {case.patient_id!r} has no mask")
        prob = predict_case(model, case, cfg.window_depth, cfg.stride)
        scores.append(dsc(confusion(binarize(prob), case.mask)))
    return float(np.mean(scores))


def _save(path: Path, model: SegmentationModel, optimizer: Adam, scheduler: ReduceLROnPlateau, step: int, history: list[dict[str, float]]) -> None:
    save_checkpoint(
        path,
        model_config=model.cfg.to_dict(),
        state_dict=model.state_dict(),
        optimizer=optimizer.state_dict(),
        scheduler=scheduler.state_dict(),
        step=step,
        history=history,
    )


def train(
    model: SegmentationModel,
    cases: list[Case],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    val_cases: Optional[list[Case]] = None,
    resume: Optional[Path] = None,
) -> TrainResult:
    """Optimizes `model` with Adam on the soft Dice loss.

    Args:
        model: Network to train in place.
        cases: Training cases; each must carry a mask.
        cfg: Optimization settings.
        out_dir: Where `best.pt` (best validation DSC) and `last.pt` go. Nothing is
            written if `None`.
        val_cases: Validation cases, defaulting to the training cases.
        resume: Checkpoint to continue from, restoring weights, optimizer, scheduler,
            step counter and history.

    Returns:
        Loss history (one entry per step, validation DSC where evaluated) and checkpoint
        locations.

    Raises:
        NumericalError: The loss became NaN or infinite.
    """
    if not cases:
        raise DataError("No training cases")
    val_cases = cases if val_cases is None else val_cases
    torch.manual_seed(cfg.seed)
    device = next(model.parameters()).device

    dataset = WindowDataset(cases, cfg.window_depth)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.seed),
        num_workers=cfg.num_workers,
        prefetch_factor=cfg.prefetch_factor if cfg.num_workers > 0 else None,
    )
    optimizer = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    scheduler = ReduceLROnPlateau(
        optimizer, mode="max", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )

    result = TrainResult()
    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        if payload["scheduler"] is not None:
            scheduler.load_state_dict(payload["scheduler"])
        result.steps = int(payload["step"])
        result.history = list(payload["history"])
        evaluated = [h["val_dsc"] for h in result.history if "val_dsc" in h]
        result.best_val_dsc = max(evaluated, default=-math.inf)
        logger.info(f"Resuming from {resume} at step {result.steps}")

    logger.info(f"Training on {len(dataset)} windows from {len(cases)} cases for up to {cfg.max_steps} steps")
    since_best = 0
    model.train()
    while result.steps < cfg.max_steps and not result.stopped_early:
        for pet, ct, mask in loader:
            pet, ct, mask = pet.to(device), ct.to(device), mask.to(device)
            pred = model(pet, ct)
            loss = dice_loss(pred, mask, cfg.loss_epsilon)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"Loss became {loss.item()} at step {result.steps + 1}; "
                    f"input ranges PET [{pet.min():.3g}, {pet.max():.3g}], CT [{ct.min():.3g}, {ct.max():.3g}]"
                )

            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            result.steps += 1

            with torch.no_grad():
                hard = (pred > 0.5).to(mask.dtype)
                train_dsc = float((2 * (hard * mask).sum() + cfg.loss_epsilon) / (hard.sum() + mask.sum() + cfg.loss_epsilon))
            entry = {
                "step": float(result.steps),
                "loss": float(loss.item()),
                "train_dsc": train_dsc,
                "lr": float(optimizer.param_groups[0]["lr"]),
            }
            logger.info(f"Step {result.steps}: loss {entry['loss']:.5f}, train DSC {train_dsc:.4f}")
            result.history.append(entry)

            if result.steps % cfg.eval_every == 0 or result.steps == cfg.max_steps:
                val = validation_dsc(model, val_cases, cfg)
                model.train()
                entry["val_dsc"] = val
                scheduler.step(val)
                logger.info(f"Step {result.steps}: validation DSC {val:.4f}")
                if val > result.best_val_dsc:
                    result.best_val_dsc = val
                    since_best = 0
                    if out_dir is not None:
                        result.best_checkpoint = out_dir / BEST_CHECKPOINT
                        _save(result.best_checkpoint, model, optimizer, scheduler, result.steps, result.history)
                else:
                    since_best += 1
                    if since_best >= cfg.early_stop_patience:
                        logger.info(f"No validation improvement for {since_best} rounds, stopping")
                        result.stopped_early = True

            if result.steps >= cfg.max_steps or result.stopped_early:
                break

    if out_dir is not None:
        result.last_checkpoint = out_dir / LAST_CHECKPOINT
        _save(result.last_checkpoint, model, optimizer, scheduler, result.steps, result.history)
    model.eval()
    return result
