"""Sliding-window inference, per-patient evaluation and paired comparison of methods."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from scipy import stats
from torch import nn

from fuseg3d.core import Modality, Volume3D, volume_to_tensor
from fuseg3d.data import Case, sliding_windows, stitch_windows
from fuseg3d.errors import AlignmentError, DataError, StatisticsError
from fuseg3d.metrics import SegmentationScores, binarize, metrics_table, segmentation_report, write_metrics_csv
from fuseg3d.tmtv import TMTVRecord, tmtv, write_records_csv

logger = logging.getLogger(__name__)

METRICS_CSV = "metrics.csv"
RECORDS_CSV = "tmtv_records.csv"


@torch.no_grad()
def predict_volume(model: nn.Module, pet: Volume3D, ct: Volume3D, depth: int = 32, stride: Optional[int] = None) -> Volume3D:
    """Full-volume lesion probabilities from overlapping slice windows.

    Windows of `depth` slices start every `stride` slices (half a window by default);
    overlapping predictions are averaged.
    """
    if pet.shape != ct.shape:
        raise AlignmentError(f"PET {pet.shape} and CT {ct.shape} grids differ")
    stride = stride or max(1, depth // 2)

    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    predictions = []
    try:
        for pet_window, ct_window in zip(sliding_windows(pet, depth, stride), sliding_windows(ct, depth, stride)):
            prob = model(
                volume_to_tensor(pet_window.volume).to(device),
                volume_to_tensor(ct_window.volume).to(device),
            )
            predictions.append((pet_window.offset, prob[0, 0].cpu().double().numpy()))
    finally:
        model.train(was_training)

    stitched = np.clip(stitch_windows(predictions, pet.shape[2]), 0.0, 1.0)
    return pet.with_data(stitched, modality=Modality.PROB)


def predict_case(model: nn.Module, case: Case, depth: int = 32, stride: Optional[int] = None) -> Volume3D:
    return predict_volume(model, case.pet, case.ct, depth, stride)


@dataclass
class EvaluationResult:
    scores: list[SegmentationScores] = field(default_factory=list)
    records: list[TMTVRecord] = field(default_factory=list)

    @property
    def table(self) -> pd.DataFrame:
        return metrics_table(self.scores)


def evaluate_predictions(
    predictions: Sequence[Volume3D], cases: Sequence[Case], fold_index: int = 0, threshold: float = 0.5
) -> EvaluationResult:
    """Scores probability volumes against the cases' masks.

    Raises:
        DataError: A case has no ground truth.
    """
    result = EvaluationResult()
    for prob, case in zip(predictions, cases):
        if case.mask is None:
            raise DataError(f"Ground truth missing for {case.patient_id!r}")
        predicted_mask = binarize(prob, threshold)
        result.scores.append(segmentation_report(predicted_mask, case.mask))
        result.records.append(
            TMTVRecord(case.patient_id, ctmtv=tmtv(predicted_mask), gtmtv=tmtv(case.mask), fold=fold_index)
        )
    return result


def evaluate(
    model: nn.Module,
    cases: Sequence[Case],
    depth: int = 32,
    stride: Optional[int] = None,
    fold_index: int = 0,
    out_dir: Optional[Path] = None,
) -> EvaluationResult:
    """Stitched inference, binarization at 0.5, metrics and TMTV for every case.

    With `out_dir`, writes `metrics.csv` (per patient plus mean) and `tmtv_records.csv`.
    """
    missing = [c.patient_id for c in cases if c.mask is None]
    if missing:
        raise DataError(f"Ground truth missing for {missing}")

    predictions = [predict_case(model, case, depth, stride) for case in cases]
    result = evaluate_predictions(predictions, cases, fold_index)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(result.scores, out_dir / METRICS_CSV)
        write_records_csv(result.records, out_dir / RECORDS_CSV)
    return result


@dataclass(frozen=True)
class PairedTest:
    statistic: float
    pvalue: float
    mean_difference: float
    n: int


def paired_test(a: Sequence[float], b: Sequence[float]) -> PairedTest:
    """Paired t-test of two per-patient metric vectors (`a - b`)."""
    x, y = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"Paired samples must be equally long vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise StatisticsError(f"Paired test needs at least 2 pairs, got {len(x)}")
    if np.ptp(x - y) == 0:
        raise StatisticsError("Paired differences have zero variance")

    result = stats.ttest_rel(x, y)
    test = PairedTest(float(result.statistic), float(result.pvalue), float((x - y).mean()), len(x))
    logger.info(f"Paired t-test over {test.n} patients: t = {test.statistic:.4f}, p = {test.pvalue:.4g}")
    return test
