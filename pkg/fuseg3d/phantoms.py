"""Synthetic PET/CT/mask triplets with ellipsoidal lesions of known extent."""

import logging
from dataclasses import dataclass, fields, replace
from typing import Any, NamedTuple, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from fuseg3d import Grid, Spacing
from fuseg3d.core import Modality, Volume3D
from fuseg3d.errors import ConfigError

logger = logging.getLogger(__name__)

AIR_HU = -1000.0
BODY_FRACTION = 0.45  # in-plane semi-axes of the body, relative to the grid
UPTAKE_FALLOFF = 0.3  # relative uptake drop from lesion centre to rim


@dataclass(frozen=True)
class Lesion:
    """An axis-aligned ellipsoid in voxel coordinates."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    suv: float


@dataclass(frozen=True)
class PhantomSpec:
    shape: Grid = (64, 64, 32)
    spacing_mm: Spacing = (4.0, 4.0, 3.27)
    num_lesions: int = 2
    lesion_suv_range: tuple[float, float] = (4.0, 12.0)
    background_suv: float = 1.0
    semi_axes_range: tuple[float, float] = (3.0, 7.0)
    ct_tissue_hu: float = 40.0
    ct_texture_sigma: float = 2.0
    ct_texture_amplitude: float = 20.0
    ct_lesion_hu: float = 30.0
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "lesion_suv_range", tuple(self.lesion_suv_range))
        object.__setattr__(self, "semi_axes_range", tuple(self.semi_axes_range))

        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ConfigError(f"Phantom shape must be three positive sizes, got {self.shape}")
        if self.num_lesions < 0:
            raise ConfigError(f"num_lesions must not be negative, got {self.num_lesions}")
        low, high = self.lesion_suv_range
        if not self.background_suv < low <= high:
            raise ConfigError(
                f"Lesion SUV range {self.lesion_suv_range} must lie above background {self.background_suv}"
            )
        smallest, largest = self.semi_axes_range
        if not 0 < smallest <= largest:
            raise ConfigError(f"Invalid semi-axes range {self.semi_axes_range}")
        if self.num_lesions and 2 * largest + 1 > min(self.shape):
            raise ConfigError(f"Lesions with semi-axis {largest} do not fit into {self.shape}")
        if self.noise_sigma < 0 or self.ct_texture_sigma < 0:
            raise ConfigError("Noise and texture widths must not be negative")

    @classmethod
    def from_mapping(cls, mapping: dict[str, Any]) -> "PhantomSpec":
        unknown = set(mapping) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown keys in 'phantom' section: {sorted(unknown)}")
        return cls(**mapping)


class Phantom(NamedTuple):
    pet: Volume3D
    ct: Volume3D
    mask: Volume3D
    lesions: tuple[Lesion, ...]


def sample_lesions(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Lesion, ...]:
    """Draws lesions lying fully inside the grid, preferably in its central half."""
    lesions = []
    for _ in range(spec.num_lesions):
        axes = tuple(float(a) for a in rng.uniform(*spec.semi_axes_range, size=3))
        center = []
        for n, a in zip(spec.shape, axes):
            low, high = max(a, 0.25 * n), min(n - 1 - a, 0.75 * n)
            if low > high:
                low, high = a, n - 1 - a
            center.append(float(rng.uniform(low, high)))
        suv = float(rng.uniform(*spec.lesion_suv_range))
        lesions.append(Lesion((center[0], center[1], center[2]), (axes[0], axes[1], axes[2]), suv))
    return tuple(lesions)


def _normalized_radius(shape: Grid, lesion: Lesion) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    return sum(((g - c) / a) ** 2 for g, c, a in zip(grids, lesion.center, lesion.semi_axes))


def generate_phantom(spec: PhantomSpec, lesions: Optional[tuple[Lesion, ...]] = None) -> Phantom:
    """Builds a PET/CT/mask triplet, bit-identical for identical specs.

    PET holds SUVs: a uniform background, lesions whose uptake falls from their peak
    SUV at the centre towards the rim, and additive Gaussian noise. CT holds HU: air
    outside an elliptic body cross-section, smoothed random soft-tissue texture inside,
    and a density offset on lesion voxels. The mask is the exact union of lesion voxels.

    Args:
        spec: Phantom parameters, `spec.seed` drives all randomness.
        lesions: Explicit lesions, replacing the `spec.num_lesions` random ones.
    """
    rng = np.random.default_rng(spec.seed)
    if lesions is None:
        lesions = sample_lesions(spec, rng)

    shape = spec.shape
    uptake = np.full(shape, spec.background_suv, dtype=np.float64)
    mask = np.zeros(shape, dtype=np.uint8)
    for lesion in lesions:
        r2 = _normalized_radius(shape, lesion)
        inside = r2 <= 1
        profile = spec.background_suv + (lesion.suv - spec.background_suv) * (1 - UPTAKE_FALLOFF * r2)
        uptake = np.where(inside, np.maximum(uptake, profile), uptake)
        mask[inside] = 1
    pet = np.maximum(uptake + rng.normal(0.0, spec.noise_sigma, size=shape), 0.0)

    h, w, _ = shape
    rows = (np.arange(h) - (h - 1) / 2) / (BODY_FRACTION * h)
    cols = (np.arange(w) - (w - 1) / 2) / (BODY_FRACTION * w)
    body = (rows[:, None] ** 2 + cols[None, :] ** 2 <= 1)[:, :, None] | mask.astype(bool)
    texture = gaussian_filter(rng.normal(size=shape), sigma=spec.ct_texture_sigma)
    texture = texture / (texture.std() or 1.0)
    tissue = spec.ct_tissue_hu + spec.ct_texture_amplitude * texture + spec.ct_lesion_hu * mask
    ct = np.where(body, tissue, AIR_HU)

    patient_id = f"phantom-{spec.seed:03d}"
    logger.debug(
        f"Generated {patient_id} {shape} with {len(lesions)} lesions, {int(mask.sum())} lesion voxels"
    )
    return Phantom(
        pet=Volume3D(pet, spec.spacing_mm, Modality.PET_SUV, patient_id),
        ct=Volume3D(ct, spec.spacing_mm, Modality.CT_HU, patient_id),
        mask=Volume3D(mask, spec.spacing_mm, Modality.MASK, patient_id),
        lesions=lesions,
    )


def generate_cohort(spec: PhantomSpec, count: int) -> list[Phantom]:
    """`count` phantoms with consecutive seeds starting at `spec.seed`."""
    return [generate_phantom(replace(spec, seed=spec.seed + i)) for i in range(count)]
