"""Soft Dice loss for training and overlap metrics for evaluation."""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
import torch

from fuseg3d import PatientID
from fuseg3d.core import Modality, Volume3D
from fuseg3d.errors import MetricError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
METRIC_COLUMNS = ["patient_id", "DSC", "sensitivity", "precision"]

ArrayLike = Union[Volume3D, np.ndarray]


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """`1 - (2 * sum(p * g) + eps) / (sum(p) + sum(g) + eps)`, summed over all voxels of
    the batch.

    Args:
        pred: Probabilities in [0, 1].
        gt: Binary ground truth of the same shape.
        epsilon: Smoothing term keeping the ratio defined for empty inputs.

    Returns:
        Scalar loss, differentiable in `pred`.
    """
    if pred.shape != gt.shape:
        raise MetricError(f"Prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ in shape")
    gt = gt.to(pred.dtype)
    overlap = (pred * gt).sum()
    return 1 - (2 * overlap + epsilon) / (pred.sum() + gt.sum() + epsilon)


def binarize(pred: Volume3D, threshold: float = 0.5) -> Volume3D:
    """Voxels whose probability strictly exceeds `threshold` become 1."""
    if not 0 < threshold < 1:
        raise ParameterError(f"Threshold must lie in (0, 1), got {threshold}")
    return pred.with_data((pred.data > threshold).astype(np.uint8), modality=Modality.MASK)


def _as_binary(x: ArrayLike, name: str) -> np.ndarray:
    data = x.data if isinstance(x, Volume3D) else np.asarray(x)
    if not np.isin(data, (0, 1)).all():
        raise MetricError(f"{name} is not binary")
    return data.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_mask: ArrayLike, gt_mask: ArrayLike) -> ConfusionCounts:
    pred = _as_binary(pred_mask, "Predicted mask")
    gt = _as_binary(gt_mask, "Ground-truth mask")
    if pred.shape != gt.shape:
        raise MetricError(f"Mask shapes differ: {pred.shape} vs {gt.shape}")

    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=pred.size - tp - fp - fn)


# Empty denominators: both masks empty counts as perfect agreement, anything else as none.


def dsc(c: ConfusionCounts) -> float:
    denominator = 2 * c.tp + c.fp + c.fn
    if denominator == 0:
        return 1.0
    return 2 * c.tp / denominator


def sensitivity(c: ConfusionCounts) -> float:
    denominator = c.tp + c.fn
    if denominator == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / denominator


def precision(c: ConfusionCounts) -> float:
    denominator = c.tp + c.fp
    if denominator == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / denominator


@dataclass(frozen=True)
class SegmentationScores:
    patient_id: PatientID
    dsc: float
    sensitivity: float
    precision: float

    def as_row(self) -> dict[str, Union[str, float]]:
        return dict(zip(METRIC_COLUMNS, asdict(self).values()))


def segmentation_report(pred_mask: Volume3D, gt_mask: Volume3D) -> SegmentationScores:
    counts = confusion(pred_mask, gt_mask)
    scores = SegmentationScores(
        patient_id=gt_mask.patient_id,
        dsc=dsc(counts),
        sensitivity=sensitivity(counts),
        precision=precision(counts),
    )
    if not counts.tp + counts.fn:
        logger.warning(f"Ground truth of {gt_mask.patient_id!r} is empty")
    logger.info(
        f"{scores.patient_id}: DSC {scores.dsc:.4f}, sensitivity {scores.sensitivity:.4f}, precision {scores.precision:.4f}"
    )
    return scores


def metrics_table(scores: list[SegmentationScores]) -> pd.DataFrame:
    """Per-patient rows followed by the macro average in a row labelled `mean`."""
    table = pd.DataFrame([s.as_row() for s in scores], columns=METRIC_COLUMNS)
    if not table.empty:
        mean = table[METRIC_COLUMNS[1:]].mean()
        table = pd.concat(
            [table, pd.DataFrame([{"patient_id": "mean", **mean.to_dict()}])], ignore_index=True
        )
    return table


def write_metrics_csv(scores: list[SegmentationScores], path: Path) -> pd.DataFrame:
    table = metrics_table(scores)
    table.to_csv(path, index=False)
    logger.info(f"Wrote metrics of {len(scores)} patients to {path}")
    return table
