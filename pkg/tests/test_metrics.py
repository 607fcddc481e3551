from contextlib import nullcontext

import numpy as np
import pandas as pd
import pytest
import torch
from torch.autograd import gradcheck

from fuseg3d.core import Modality, Volume3D
from fuseg3d.errors import MetricError, ParameterError
from fuseg3d.metrics import (
    METRIC_COLUMNS,
    SegmentationScores,
    binarize,
    confusion,
    dice_loss,
    dsc,
    metrics_table,
    precision,
    segmentation_report,
    sensitivity,
    write_metrics_csv,
)

VOID = None  # Placeholder for cases where an exception is raised


def _mask(data, patient_id: str = "p") -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.uint8), (1.0, 1.0, 1.0), Modality.MASK, patient_id)


@pytest.mark.parametrize(
    ["pred", "gt", "result"],
    [
        (torch.ones(8), torch.ones(8), 0.0),
        (torch.zeros(8), torch.zeros(8), 0.0),
        (torch.zeros(8), torch.ones(8), 1 - 1e-5 / (8 + 1e-5)),
        (torch.full((4,), 0.5), torch.tensor([1.0, 1.0, 0.0, 0.0]), 1 - (2 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5)),
    ],
)
def test_dice_loss_values(pred, gt, result):
    assert dice_loss(pred, gt).item() == pytest.approx(result, abs=1e-6)


def test_dice_loss_is_global_over_the_batch():
    pred = torch.rand(3, 1, 4, 4, 4)
    gt = (torch.rand(3, 1, 4, 4, 4) > 0.5).float()
    torch.testing.assert_close(dice_loss(pred, gt), dice_loss(pred.flatten(), gt.flatten()))


def test_dice_loss_shape_mismatch():
    with pytest.raises(MetricError):
        dice_loss(torch.zeros(2, 2), torch.zeros(4))


def test_dice_loss_gradcheck():
    pred = torch.rand(2, 1, 3, 3, 3, dtype=torch.float64, requires_grad=True)
    gt = (torch.rand(2, 1, 3, 3, 3) > 0.5).double()
    assert gradcheck(lambda p: dice_loss(p, gt), (pred,), eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.mark.parametrize(
    ["threshold", "result", "expectation"],
    [
        (0.5, [0, 0, 1], nullcontext()),
        (0.2, [0, 1, 1], nullcontext()),
        (0.0, VOID, pytest.raises(ParameterError)),
        (1.0, VOID, pytest.raises(ParameterError)),
    ],
)
def test_binarize(threshold, result, expectation):
    prob = Volume3D(np.array([0.1, 0.5, 0.9]).reshape(1, 1, 3), (1.0, 1.0, 1.0), Modality.PROB)
    with expectation:
        out = binarize(prob, threshold)
        assert out.modality is Modality.MASK
        assert out.data.ravel().tolist() == result


@pytest.mark.parametrize(
    ["pred", "gt", "dsc_", "sensitivity_", "precision_"],
    [
        ([[[0, 0]]], [[[0, 0]]], 1.0, 1.0, 1.0),
        ([[[1, 0]]], [[[0, 0]]], 0.0, 0.0, 0.0),
        ([[[0, 0]]], [[[1, 0]]], 0.0, 0.0, 0.0),
        ([[[1, 1]]], [[[1, 1]]], 1.0, 1.0, 1.0),
        ([[[1, 1, 0, 0]]], [[[1, 0, 1, 0]]], 0.5, 0.5, 0.5),
        ([[[1, 1, 1, 0]]], [[[1, 0, 0, 0]]], 0.5, 1.0, 1 / 3),
    ],
)
def test_metric_conventions(pred, gt, dsc_, sensitivity_, precision_):
    counts = confusion(_mask(pred), _mask(gt))
    assert dsc(counts) == pytest.approx(dsc_)
    assert sensitivity(counts) == pytest.approx(sensitivity_)
    assert precision(counts) == pytest.approx(precision_)


def test_metrics_match_voxel_counting_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        shape = tuple(rng.integers(1, 17, size=3))
        pred = rng.random(shape) < rng.random()
        gt = rng.random(shape) < rng.random()

        tp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p and g)
        fp = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p and not g)
        fn = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if g and not p)

        counts = confusion(pred.astype(np.uint8), gt.astype(np.uint8))
        assert (counts.tp, counts.fp, counts.fn) == (tp, fp, fn)
        assert counts.total == pred.size
        if 2 * tp + fp + fn:
            assert dsc(counts) == 2 * tp / (2 * tp + fp + fn)
        if tp + fn:
            assert sensitivity(counts) == tp / (tp + fn)
        if tp + fp:
            assert precision(counts) == tp / (tp + fp)


@pytest.mark.parametrize(
    ["pred", "gt", "expectation"],
    [
        (np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), nullcontext()),
        (np.zeros((2, 2, 2)), np.zeros((2, 2, 1)), pytest.raises(MetricError)),
        (np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2)), pytest.raises(MetricError)),
        (np.zeros((2, 2, 2)), np.full((2, 2, 2), 2), pytest.raises(MetricError)),
    ],
)
def test_confusion_errors(pred, gt, expectation):
    with expectation:
        confusion(pred, gt)


def test_segmentation_report_and_table(tmp_path):
    gt = _mask([[[1, 1, 0, 0]]], "a")
    scores = [
        segmentation_report(_mask([[[1, 1, 0, 0]]], "a"), gt),
        segmentation_report(_mask([[[1, 0, 0, 0]]], "b"), _mask([[[1, 1, 0, 0]]], "b")),
    ]
    assert scores[0] == SegmentationScores("a", 1.0, 1.0, 1.0)
    assert scores[1].dsc == pytest.approx(2 / 3)

    table = metrics_table(scores)
    assert list(table.columns) == METRIC_COLUMNS
    assert table["patient_id"].tolist() == ["a", "b", "mean"]
    assert table.iloc[-1]["DSC"] == pytest.approx((1 + 2 / 3) / 2)

    write_metrics_csv(scores, tmp_path / "metrics.csv")
    read = pd.read_csv(tmp_path / "metrics.csv")
    assert read["sensitivity"].tolist() == pytest.approx([1.0, 0.5, 0.75])


def test_empty_table_has_no_mean_row():
    assert metrics_table([]).empty
