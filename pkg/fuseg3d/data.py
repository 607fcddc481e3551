"""Cases on disk, patient-level folds and slice windows."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
from sklearn.model_selection import KFold
from torch.utils.data import Dataset

from fuseg3d import VERBOSE, PatientID
from fuseg3d.core import AcquisitionMeta, Modality, Volume3D
from fuseg3d.errors import AlignmentError, ConfigError, DataError
from fuseg3d.io import load_volume, read_json, save_volume, sidecar_path
from fuseg3d.iteration import window_offsets
from fuseg3d.phantoms import Phantom
from fuseg3d.preprocess import PreprocessConfig, preprocess_mask, preprocess_pair

logger = logging.getLogger(__name__)

PET_FILE = "pet.nii.gz"
CT_FILE = "ct.nii.gz"
MASK_FILE = "mask.nii.gz"
ACQUISITION_FILE = "acquisition.json"


@dataclass(frozen=True)
class Case:
    """A preprocessed patient: SUV PET, windowed CT and, if known, the lesion mask."""

    patient_id: PatientID
    pet: Volume3D
    ct: Volume3D
    mask: Optional[Volume3D] = None


def prepare_case(
    pet: Volume3D,
    ct: Volume3D,
    mask: Optional[Volume3D],
    meta: Optional[AcquisitionMeta],
    cfg: PreprocessConfig,
) -> Case:
    if mask is not None and mask.shape != pet.shape:
        raise AlignmentError(f"Mask {mask.shape} and PET {pet.shape} of {pet.patient_id!r} differ")
    pet, ct = preprocess_pair(pet, ct, meta, cfg)
    if mask is not None:
        mask = preprocess_mask(mask, cfg)
    return Case(pet.patient_id, pet, ct, mask)


def cases_from_phantoms(phantoms: list[Phantom], cfg: PreprocessConfig) -> list[Case]:
    return [prepare_case(p.pet, p.ct, p.mask, None, cfg) for p in phantoms]


def load_case_volume(path: Path, fallback: Modality, patient_id: str) -> Volume3D:
    modality = None if sidecar_path(path).exists() else fallback
    return load_volume(path, modality=modality, patient_id=patient_id)


def load_cases(data_dir: Path, cfg: PreprocessConfig, require_mask: bool = False) -> list[Case]:
    """Loads every `<patient_id>/` subdirectory of `data_dir`.

    Each holds `pet.nii.gz` and `ct.nii.gz`, optionally `mask.nii.gz` and, for raw PET,
    `acquisition.json`. Without sidecars, PET counts as raw if acquisition metadata is
    present and as SUV otherwise, CT as HU.

    Raises:
        FileNotFoundError: `data_dir` does not exist.
        DataError: A mask is required but missing.
    """
    if not data_dir.is_dir():
        raise FileNotFoundError(f"No data directory at {data_dir}")

    cases = []
    for patient_dir in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        pid = patient_dir.name
        meta_path = patient_dir / ACQUISITION_FILE
        meta = AcquisitionMeta.from_json(read_json(meta_path)) if meta_path.exists() else None

        pet = load_case_volume(patient_dir / PET_FILE, Modality.PET_RAW if meta else Modality.PET_SUV, pid)
        ct = load_case_volume(patient_dir / CT_FILE, Modality.CT_HU, pid)
        mask_path = patient_dir / MASK_FILE
        mask = load_case_volume(mask_path, Modality.MASK, pid) if mask_path.exists() else None
        if mask is None and require_mask:
            raise DataError(f"Ground truth missing for {pid!r}: expected {mask_path}")

        cases.append(prepare_case(pet, ct, mask, meta, cfg))
        logger.debug(f"Loaded case {pid!r} from {patient_dir}")

    if not cases:
        logger.warning(f"No patient directories found in {data_dir}")
    logger.info(f"Loaded {len(cases)} cases from {data_dir}")
    return cases


def write_cases(phantoms: list[Phantom], out_dir: Path) -> list[Path]:
    """Writes phantoms in the layout `load_cases` reads."""
    written = []
    for phantom in phantoms:
        patient_dir = out_dir / phantom.pet.patient_id
        patient_dir.mkdir(parents=True, exist_ok=True)
        save_volume(phantom.pet, patient_dir / PET_FILE)
        save_volume(phantom.ct, patient_dir / CT_FILE)
        save_volume(phantom.mask, patient_dir / MASK_FILE)
        written.append(patient_dir)
    return written


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_patient_ids: tuple[PatientID, ...]
    test_patient_ids: tuple[PatientID, ...]


def make_folds(patient_ids: list[PatientID], k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Patient-level k-fold split, deterministic for a given seed.

    Test folds partition the patients and differ in size by at most one.
    """
    ids = sorted(patient_ids)
    if len(set(ids)) != len(ids):
        raise ConfigError("Patient IDs must be unique to split by patient")
    if k < 2:
        raise ConfigError(f"Cross-validation needs at least 2 folds, got {k}")
    if len(ids) < k:
        raise ConfigError(f"Cannot split {len(ids)} patients into {k} folds")

    splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
    folds = [
        FoldSplit(
            fold_index=i,
            train_patient_ids=tuple(ids[j] for j in train),
            test_patient_ids=tuple(ids[j] for j in test),
        )
        for i, (train, test) in enumerate(splitter.split(ids))
    ]
    for fold in folds:
        logger.debug(
            f"Fold {fold.fold_index}: {len(fold.train_patient_ids)} train, {len(fold.test_patient_ids)} test"
        )
    return folds


def validation_ids(
    train_ids: tuple[PatientID, ...], fraction: float = 0.2, seed: int = 0
) -> tuple[tuple[PatientID, ...], tuple[PatientID, ...]]:
    """Holds out a fraction of the training patients for model selection.

    With fewer than five training patients nothing is held out and the training patients
    double as validation set.
    """
    if len(train_ids) < 5:
        return train_ids, train_ids
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(train_ids))
    count = max(1, int(round(fraction * len(train_ids))))
    held_out = {train_ids[i] for i in order[:count]}
    return (
        tuple(p for p in train_ids if p not in held_out),
        tuple(p for p in train_ids if p in held_out),
    )


class Window(NamedTuple):
    offset: int
    volume: Volume3D


def _pad_depth(data: np.ndarray, depth: int) -> np.ndarray:
    missing = depth - data.shape[2]
    if missing <= 0:
        return data
    return np.pad(data, ((0, 0), (0, 0), (0, missing)))


def sliding_windows(v: Volume3D, depth: int = 32, stride: Optional[int] = None) -> list[Window]:
    """Cuts a volume into windows of `depth` consecutive slices.

    Windows start every `stride` slices (default: `depth`, i.e. no overlap) and the last
    one is aligned to the volume's end. Volumes shorter than `depth` are zero-padded.
    """
    stride = depth if stride is None else stride
    data = _pad_depth(v.data, depth)
    windows = [
        Window(offset, v.with_data(data[:, :, offset : offset + depth]))
        for offset in window_offsets(data.shape[2], depth, stride)
    ]
    logger.log(level=VERBOSE, msg=f"Cut {v.shape} into {len(windows)} windows of depth {depth}")
    return windows


def stitch_windows(predictions: list[tuple[int, np.ndarray]], length: int) -> np.ndarray:
    """Averages window predictions back into a volume of `length` slices.

    Windows are accumulated in offset order, so the result does not depend on the order
    they are passed in.

    Args:
        predictions: `(offset, array)` pairs, arrays of shape (H, W, depth).
        length: Slice count of the original volume; padding beyond it is dropped.
    """
    if not predictions:
        raise DataError("Nothing to stitch")
    ordered = sorted(predictions, key=lambda item: item[0])
    h, w, depth = ordered[0][1].shape
    total = max(length, max(offset + p.shape[2] for offset, p in ordered))

    summed = np.zeros((h, w, total), dtype=np.float64)
    counts = np.zeros(total, dtype=np.int64)
    for offset, prediction in ordered:
        summed[:, :, offset : offset + prediction.shape[2]] += prediction
        counts[offset : offset + prediction.shape[2]] += 1

    if (counts[:length] == 0).any():
        raise DataError("Windows do not cover every slice")
    return (summed / np.maximum(counts, 1))[:, :, :length]


class WindowDataset(Dataset[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]):
    """All training windows of a set of cases, as `(pet, ct, mask)` tensors of shape
    `(1, H, W, depth)`."""

    def __init__(self, cases: list[Case], depth: int, stride: Optional[int] = None) -> None:
        self.cases = cases
        self.depth = depth
        self.index: list[tuple[int, int]] = []
        for i, case in enumerate(cases):
            if case.mask is None:
                raise DataError(f"Training case {case.patient_id!r} has no mask")
            length = max(case.pet.shape[2], depth)
            step = depth if stride is None else stride
            self.index.extend((i, offset) for offset in window_offsets(length, depth, step))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, item: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        i, offset = self.index[item]
        case = self.cases[i]
        assert case.mask is not None

        def cut(v: Volume3D) -> torch.Tensor:
            window = _pad_depth(v.data, self.depth)[:, :, offset : offset + self.depth]
            return torch.as_tensor(np.ascontiguousarray(window), dtype=torch.float32)[None]

        return cut(case.pet), cut(case.ct), cut(case.mask)
