import random
from contextlib import nullcontext
from dataclasses import replace

import numpy as np
import pytest

from fuseg3d.core import Modality, Volume3D
from fuseg3d.data import (
    CT_FILE,
    MASK_FILE,
    PET_FILE,
    Case,
    WindowDataset,
    load_cases,
    make_folds,
    sliding_windows,
    stitch_windows,
    validation_ids,
    write_cases,
)
from fuseg3d.errors import ConfigError, DataError
from fuseg3d.phantoms import generate_cohort


def _ids(n: int) -> list[str]:
    return [f"P{i:03d}" for i in range(n)]


def test_folds_partition_the_cohort():
    ids = _ids(165)
    folds = make_folds(ids, k=5, seed=0)
    assert [f.fold_index for f in folds] == list(range(5))

    tested = [p for f in folds for p in f.test_patient_ids]
    assert sorted(tested) == ids
    for fold in folds:
        assert len(fold.test_patient_ids) == 33
        assert len(fold.train_patient_ids) == 132
        assert not set(fold.train_patient_ids) & set(fold.test_patient_ids)


def test_folds_are_deterministic_and_order_independent():
    ids = _ids(23)
    shuffled = random.Random(1).sample(ids, len(ids))
    assert make_folds(ids, seed=3) == make_folds(shuffled, seed=3)
    assert make_folds(ids, seed=3) != make_folds(ids, seed=4)


def test_uneven_folds_differ_by_at_most_one():
    sizes = [len(f.test_patient_ids) for f in make_folds(_ids(12), k=5)]
    assert sum(sizes) == 12
    assert max(sizes) - min(sizes) <= 1


@pytest.mark.parametrize(
    ["ids", "k", "expectation"],
    [
        (_ids(5), 5, nullcontext()),
        (_ids(4), 5, pytest.raises(ConfigError)),
        (_ids(10), 1, pytest.raises(ConfigError)),
        (["a", "b", "a", "c", "d"], 2, pytest.raises(ConfigError)),
    ],
)
def test_fold_errors(ids, k, expectation):
    with expectation:
        make_folds(ids, k=k)


def test_validation_split():
    train_ids = tuple(_ids(132))
    kept, held_out = validation_ids(train_ids, seed=0)
    assert len(held_out) == 26
    assert sorted(kept + held_out) == sorted(train_ids)
    assert validation_ids(train_ids, seed=0) == (kept, held_out)


def test_small_training_sets_are_reused_for_validation():
    train_ids = tuple(_ids(4))
    assert validation_ids(train_ids) == (train_ids, train_ids)


def _ramp(depth: int) -> Volume3D:
    data = np.broadcast_to(np.arange(depth, dtype=np.float64), (4, 4, depth))
    return Volume3D(data, (1.0, 1.0, 1.0), Modality.PET_SUV, "p")


@pytest.mark.parametrize(
    ["length", "depth", "stride", "offsets"],
    [
        (96, 32, None, [0, 32, 64]),
        (100, 32, None, [0, 32, 64, 68]),
        (64, 32, 16, [0, 16, 32]),
        (20, 32, None, [0]),
        (32, 32, None, [0]),
    ],
)
def test_sliding_windows(length, depth, stride, offsets):
    v = _ramp(length)
    windows = sliding_windows(v, depth, stride)
    assert [w.offset for w in windows] == offsets
    for window in windows:
        assert window.volume.shape == (4, 4, depth)
        assert window.volume.spacing_mm == v.spacing_mm
        valid = min(depth, length - window.offset)
        assert np.array_equal(window.volume.data[0, 0, :valid], v.data[0, 0, window.offset : window.offset + valid])
        assert not window.volume.data[:, :, valid:].any()


@pytest.mark.parametrize(["length", "stride"], [(96, None), (100, None), (100, 16), (20, None)])
def test_stitching_reassembles_the_volume(length, stride):
    v = _ramp(length)
    windows = sliding_windows(v, 32, stride)
    stitched = stitch_windows([(w.offset, w.volume.data) for w in windows], length)
    np.testing.assert_allclose(stitched, v.data)


def test_stitching_ignores_window_order():
    rng = np.random.default_rng(0)
    predictions = [(offset, rng.random((3, 3, 32))) for offset in (0, 16, 32, 48, 68)]
    shuffled = random.Random(0).sample(predictions, len(predictions))
    assert np.array_equal(stitch_windows(predictions, 100), stitch_windows(shuffled, 100))


def test_stitching_averages_constant_predictions():
    predictions = [(offset, np.full((2, 2, 32), 0.25)) for offset in (0, 16, 32, 36)]
    np.testing.assert_allclose(stitch_windows(predictions, 68), 0.25)


@pytest.mark.parametrize(
    ["predictions", "expectation"],
    [
        ([], pytest.raises(DataError)),
        ([(0, np.zeros((2, 2, 8))), (10, np.zeros((2, 2, 8)))], pytest.raises(DataError)),
        ([(0, np.zeros((2, 2, 8))), (8, np.zeros((2, 2, 8)))], nullcontext()),
    ],
)
def test_stitching_errors(predictions, expectation):
    with expectation:
        stitch_windows(predictions, 16)


def test_window_dataset(toy_cases):
    dataset = WindowDataset(toy_cases, depth=16)
    assert len(dataset) == 3
    pet, ct, mask = dataset[0]
    assert pet.shape == ct.shape == mask.shape == (1, 16, 16, 16)
    assert mask.unique().tolist() in ([0.0, 1.0], [0.0], [1.0])

    assert len(WindowDataset(toy_cases, depth=8, stride=4)) == 9
    assert WindowDataset(toy_cases, depth=32)[0][0].shape == (1, 16, 16, 32)


def test_window_dataset_needs_masks(toy_cases):
    unlabeled = [replace(toy_cases[0], mask=None)]
    with pytest.raises(DataError):
        WindowDataset(unlabeled, depth=16)


def test_cases_round_trip_through_disk(tmp_path, phantom_spec, toy_geometry, toy_cases):
    written = write_cases(generate_cohort(phantom_spec, 3), tmp_path)
    assert [p.name for p in written] == ["phantom-000", "phantom-001", "phantom-002"]
    for patient_dir in written:
        assert {PET_FILE, CT_FILE, MASK_FILE} <= {p.name for p in patient_dir.iterdir()}

    loaded = load_cases(tmp_path, toy_geometry, require_mask=True)
    assert [c.patient_id for c in loaded] == [c.patient_id for c in toy_cases]
    for got, expected in zip(loaded, toy_cases):
        assert isinstance(got, Case)
        np.testing.assert_allclose(got.pet.data, expected.pet.data)
        np.testing.assert_allclose(got.ct.data, expected.ct.data)
        assert got.mask is not None and expected.mask is not None
        assert np.array_equal(got.mask.data, expected.mask.data)


def test_load_cases_errors(tmp_path, phantom_spec, toy_geometry):
    with pytest.raises(FileNotFoundError):
        load_cases(tmp_path / "absent", toy_geometry)

    (patient_dir,) = write_cases(generate_cohort(phantom_spec, 1), tmp_path)
    (patient_dir / MASK_FILE).unlink()
    (case,) = load_cases(tmp_path, toy_geometry)
    assert case.mask is None
    with pytest.raises(DataError):
        load_cases(tmp_path, toy_geometry, require_mask=True)
