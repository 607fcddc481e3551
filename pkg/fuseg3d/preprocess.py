"""Intensity normalization and in-plane resampling of PET/CT pairs.

The processing order is fixed: intensity transform (SUV or CT window), then bicubic
in-plane resampling, then central cropping.
"""

import logging
from dataclasses import dataclass, fields
from typing import Any, Optional

import numpy as np

from fuseg3d import VERBOSE
from fuseg3d.core import AcquisitionMeta, Modality, Volume3D
from fuseg3d.errors import AlignmentError, ConfigError, MetadataError, ParameterError

logger = logging.getLogger(__name__)

DECAY_CONSTANT = 0.693  # ln 2, as conventionally rounded in SUV formulas
CATMULL_ROM_A = -0.5


@dataclass(frozen=True)
class PreprocessConfig:
    target_inplane: int = 256
    crop_inplane: int = 224
    ct_window_level: float = 40.0
    ct_window_width: float = 400.0
    suv_clip: Optional[float] = None

    def __post_init__(self) -> None:
        if self.target_inplane < 1 or self.crop_inplane < 1:
            raise ConfigError(f"In-plane sizes must be positive: {self}")
        if self.crop_inplane > self.target_inplane:
            raise ConfigError(
                f"crop_inplane ({self.crop_inplane}) exceeds target_inplane ({self.target_inplane})"
            )
        if not self.ct_window_width > 0:
            raise ConfigError(f"ct_window_width must be positive, got {self.ct_window_width}")
        if self.suv_clip is not None and not self.suv_clip > 0:
            raise ConfigError(f"suv_clip must be positive when set, got {self.suv_clip}")

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> "PreprocessConfig":
        unknown = set(mapping) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown keys in 'preprocess' section: {sorted(unknown)}")
        return cls(**mapping)


def _require(v: Volume3D, *modalities: Modality) -> None:
    if v.modality not in modalities:
        expected = ", ".join(m.value for m in modalities)
        raise ParameterError(f"Expected a {expected} volume, got {v.modality.value}")


def suv_bw(pet: Volume3D, meta: AcquisitionMeta, clip: Optional[float] = None) -> Volume3D:
    """Converts raw PET pixel values to body-weight standardized uptake values.

    Each voxel `v` becomes `(RS*v + RI) / (A * exp(-0.693 * dt / T_half) / (W * 1000))`,
    with `dt` the time between injection and acquisition. Weight is taken in kg and
    converted to g, so a uniform distribution of the dose yields SUV 1 at unit density.

    Args:
        pet: Raw PET volume.
        meta: Acquisition parameters. Their invariants are checked on construction.
        clip: If given, SUVs are clipped to `[0, clip]`.

    Returns:
        SUV volume on the same grid.
    """
    _require(pet, Modality.PET_RAW)

    decay = np.exp(-DECAY_CONSTANT * meta.elapsed_seconds / meta.half_life)
    decayed_dose_per_gram = meta.injected_dose * decay / (meta.weight * 1000.0)
    activity = meta.rescale_slope * pet.data.astype(np.float64) + meta.rescale_intercept
    suv = activity / decayed_dose_per_gram
    if clip is not None:
        suv = np.clip(suv, 0.0, clip)

    logger.debug(
        f"SUV for {pet.patient_id!r}: decay factor {decay:.6f}, range [{suv.min():.4g}, {suv.max():.4g}]"
    )
    return pet.with_data(suv, modality=Modality.PET_SUV)


def ct_window(ct: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    """Maps the band `level ± width/2` (in HU) linearly onto [0, 1], clamping outside."""
    _require(ct, Modality.CT_HU)

    low = cfg.ct_window_level - cfg.ct_window_width / 2
    high = cfg.ct_window_level + cfg.ct_window_width / 2
    windowed = (np.clip(ct.data.astype(np.float64), low, high) - low) / cfg.ct_window_width
    return ct.with_data(windowed, modality=Modality.CT_NORM)


def _cubic(x: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    x = np.abs(x)
    near = (a + 2) * x**3 - (a + 3) * x**2 + 1
    far = a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _mirror(index: np.ndarray, n: int) -> np.ndarray:
    """Reflects indices at the borders without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(index)
    period = 2 * (n - 1)
    index = np.mod(index, period)
    return np.where(index > n - 1, period - index, index)


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix of shape (n_out, n_in) for one axis.

    Sample centres are aligned, i.e. output sample `i` sits at input coordinate
    `(i + 0.5) * n_in / n_out - 0.5`.
    """
    if n_in == n_out:
        return np.eye(n_in)

    centres = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centres).astype(int)
    frac = centres - base

    matrix = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        weights = _cubic(frac - tap)
        np.add.at(matrix, (rows, _mirror(base + tap, n_in)), weights)
    return matrix


def resample_inplane(v: Volume3D, target: int) -> Volume3D:
    """Bicubic (Catmull-Rom) resampling of every axial slice to `target` x `target`.

    The slice count is unchanged; in-plane spacing is rescaled so that the physical
    extent is preserved.
    """
    if target < 1:
        raise ParameterError(f"Target size must be positive, got {target}")
    if v.modality is Modality.MASK:
        return resample_mask(v, target)

    h, w, _ = v.shape
    mh, mw = bicubic_matrix(h, target), bicubic_matrix(w, target)
    data = np.einsum("ia,jb,abk->ijk", mh, mw, v.data.astype(np.float64), optimize=True)

    sx, sy, sz = v.spacing_mm
    spacing = (sx * h / target, sy * w / target, sz)
    logger.log(level=VERBOSE, msg=f"Resampled {v.shape} -> {data.shape}, spacing {spacing}")
    return v.with_data(data, spacing_mm=spacing)


def resample_mask(mask: Volume3D, target: int) -> Volume3D:
    """Nearest-neighbour counterpart of `resample_inplane`, keeping masks binary."""
    if target < 1:
        raise ParameterError(f"Target size must be positive, got {target}")

    h, w, _ = mask.shape
    rows = np.minimum(((np.arange(target) + 0.5) * h / target).astype(int), h - 1)
    cols = np.minimum(((np.arange(target) + 0.5) * w / target).astype(int), w - 1)
    data = mask.data[np.ix_(rows, cols)]

    sx, sy, sz = mask.spacing_mm
    return mask.with_data(data, spacing_mm=(sx * h / target, sy * w / target, sz))


def center_crop(v: Volume3D, crop: int) -> Volume3D:
    """Central `crop` x `crop` region of every slice, starting at `(size - crop) // 2`."""
    h, w, _ = v.shape
    if crop < 1 or crop > h or crop > w:
        raise ParameterError(f"Cannot crop {crop}x{crop} from in-plane size {h}x{w}")

    top, left = (h - crop) // 2, (w - crop) // 2
    return v.with_data(v.data[top : top + crop, left : left + crop, :])


def _check_alignment(pet: Volume3D, ct: Volume3D) -> None:
    """Co-registered volumes share slice count and physical extent, up to one voxel."""
    if pet.shape[2] != ct.shape[2]:
        raise AlignmentError(
            f"Slice counts differ for {pet.patient_id!r}: PET {pet.shape[2]}, CT {ct.shape[2]}"
        )

    for axis in range(3):
        pet_extent = pet.shape[axis] * pet.spacing_mm[axis]
        ct_extent = ct.shape[axis] * ct.spacing_mm[axis]
        tolerance = max(pet.spacing_mm[axis], ct.spacing_mm[axis])
        if abs(pet_extent - ct_extent) > tolerance:
            raise AlignmentError(
                f"Extents differ on axis {axis} for {pet.patient_id!r}: "
                f"PET {pet_extent:.2f} mm, CT {ct_extent:.2f} mm"
            )


def _finish(v: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    if v.shape[:2] != (cfg.target_inplane, cfg.target_inplane):
        v = resample_inplane(v, cfg.target_inplane)
    return center_crop(v, cfg.crop_inplane)


def preprocess_pair(
    pet: Volume3D,
    ct: Volume3D,
    meta: Optional[AcquisitionMeta],
    cfg: PreprocessConfig,
) -> tuple[Volume3D, Volume3D]:
    """Brings a co-registered PET/CT pair onto the network's input grid.

    Stages already applied are skipped: a `PET_SUV` input is not converted again and a
    `CT_NORM` input is not windowed again.

    Args:
        pet: `PET_RAW` or `PET_SUV` volume.
        ct: `CT_HU` or `CT_NORM` volume.
        meta: Acquisition parameters, required for `PET_RAW` inputs.
        cfg: Preprocessing settings.

    Returns:
        `(PET_SUV, CT_NORM)` volumes of in-plane size `cfg.crop_inplane` on one grid.

    Raises:
        AlignmentError: The slice counts differ, or the physical extents differ by more
            than one voxel.
        MetadataError: Raw PET without acquisition parameters.
    """
    _require(pet, Modality.PET_RAW, Modality.PET_SUV)
    _require(ct, Modality.CT_HU, Modality.CT_NORM)
    _check_alignment(pet, ct)

    if pet.modality is Modality.PET_RAW:
        if meta is None:
            raise MetadataError(f"Raw PET of {pet.patient_id!r} needs acquisition metadata")
        pet = suv_bw(pet, meta, clip=cfg.suv_clip)
    elif cfg.suv_clip is not None:
        pet = pet.with_data(np.clip(pet.data, 0.0, cfg.suv_clip))
    if ct.modality is Modality.CT_HU:
        ct = ct_window(ct, cfg)

    pet, ct = _finish(pet, cfg), _finish(ct, cfg)
    if ct.spacing_mm != pet.spacing_mm:
        logger.debug(f"Snapping CT spacing {ct.spacing_mm} of {pet.patient_id!r} to PET {pet.spacing_mm}")
        ct = ct.with_data(ct.data, spacing_mm=pet.spacing_mm)
    logger.debug(f"Preprocessed {pet.patient_id!r}: PET {pet.shape}, CT {ct.shape}")
    return pet, ct


def preprocess_mask(mask: Volume3D, cfg: PreprocessConfig) -> Volume3D:
    """Applies the geometric part of the pipeline to a ground-truth mask."""
    _require(mask, Modality.MASK)
    return _finish(mask, cfg)
