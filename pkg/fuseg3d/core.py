"""Domain types shared by every stage of the pipeline."""

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from enum import Enum
from typing import Any, NamedTuple, Optional

import numpy as np
import torch

from fuseg3d import Depths, Grid, Kernels, PatientID, Spacing
from fuseg3d.errors import ConfigError, DataError, MetadataError, ParameterError

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    PET_RAW = "PET_RAW"
    PET_SUV = "PET_SUV"
    CT_HU = "CT_HU"
    CT_NORM = "CT_NORM"
    MASK = "MASK"
    PROB = "PROB"


@dataclass(frozen=True)
class Volume3D:
    """A scalar 3D grid with physical voxel spacing.

    The array is copied on construction and made read-only, so instances can be shared
    freely between threads and processes.

    Args:
        data: Grid of shape (H, W, D).
        spacing_mm: Voxel edge lengths (sx, sy, sz) in millimetres.
        modality: What the values mean. `MASK` volumes must be binary and `PROB`
            volumes must lie in [0, 1].
        patient_id: Opaque identifier carried through the pipeline.
    """

    data: np.ndarray
    spacing_mm: Spacing
    modality: Modality
    patient_id: PatientID = ""

    def __post_init__(self) -> None:
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise DataError(f"Volume must be three-dimensional, got shape {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise MetadataError(f"Spacing must be three positive values, got {spacing}")
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "modality", Modality(self.modality))

        if self.modality is Modality.MASK and not np.isin(data, (0, 1)).all():
            raise DataError(f"MASK volume of {self.patient_id!r} holds non-binary values")
        if self.modality is Modality.PROB and data.size and not (
            data.min() >= 0 and data.max() <= 1
        ):
            raise DataError(
                f"PROB volume of {self.patient_id!r} leaves [0, 1]: [{data.min()}, {data.max()}]"
            )

    @property
    def shape(self) -> Grid:
        h, w, d = self.data.shape
        return (h, w, d)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def with_data(
        self,
        data: np.ndarray,
        modality: Optional[Modality] = None,
        spacing_mm: Optional[Spacing] = None,
    ) -> "Volume3D":
        """Returns a new volume sharing this one's metadata, unless overridden."""
        return replace(
            self,
            data=data,
            modality=self.modality if modality is None else modality,
            spacing_mm=self.spacing_mm if spacing_mm is None else spacing_mm,
        )


@dataclass(frozen=True)
class AcquisitionMeta:
    """PET acquisition parameters needed for body-weight SUV.

    Args:
        rescale_slope: Pixel value scale factor.
        rescale_intercept: Pixel value offset.
        injected_dose: Injected activity in Bq.
        half_life: Radionuclide half-life in seconds.
        injection_time: Time of injection.
        acquisition_time: Start of acquisition.
        weight: Patient weight in kg.
    """

    rescale_slope: float
    rescale_intercept: float
    injected_dose: float
    half_life: float
    injection_time: datetime
    acquisition_time: datetime
    weight: float

    def __post_init__(self) -> None:
        if not self.injected_dose > 0:
            raise ParameterError(f"Injected dose must be positive, got {self.injected_dose}")
        if not self.half_life > 0:
            raise ParameterError(f"Half-life must be positive, got {self.half_life}")
        if not self.weight > 0:
            raise ParameterError(f"Weight must be positive, got {self.weight}")
        if self.acquisition_time < self.injection_time:
            raise ParameterError(
                f"Acquisition ({self.acquisition_time}) precedes injection ({self.injection_time})"
            )

    @property
    def elapsed_seconds(self) -> float:
        return (self.acquisition_time - self.injection_time).total_seconds()

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["injection_time"] = self.injection_time.isoformat()
        out["acquisition_time"] = self.acquisition_time.isoformat()
        return out

    @classmethod
    def from_json(cls, mapping: dict[str, Any]) -> "AcquisitionMeta":
        try:
            return cls(
                rescale_slope=float(mapping["rescale_slope"]),
                rescale_intercept=float(mapping["rescale_intercept"]),
                injected_dose=float(mapping["injected_dose"]),
                half_life=float(mapping["half_life"]),
                injection_time=datetime.fromisoformat(mapping["injection_time"]),
                acquisition_time=datetime.fromisoformat(mapping["acquisition_time"]),
                weight=float(mapping["weight"]),
            )
        except KeyError as e:
            raise MetadataError(f"Acquisition metadata lacks field {e}") from e


class FeatureMap5D(NamedTuple):
    """A batched feature tensor of shape (B, C, H, W, D) tagged with its pyramid level."""

    data: torch.Tensor
    scale_index: int


def _from_mapping(cls: Any, mapping: dict[str, Any], section: str) -> dict[str, Any]:
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}' section: {sorted(unknown)}")
    return dict(mapping)


@dataclass(frozen=True)
class MsifConfig:
    """Fusion-module settings.

    The three switches `multiscale`, `cross_attention` and `gated` exist for the module
    study: turning all of them off yields single-scale fusion without attention or gates.
    """

    conventional_values: bool = False
    reduction_ratio: int = 4
    spatial_kernel: int = 7
    cross_attention_depth: int = 2
    multiscale: bool = True
    cross_attention: bool = True
    gated: bool = True

    def __post_init__(self) -> None:
        if self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be >= 1, got {self.reduction_ratio}")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be a positive odd number, got {self.spatial_kernel}")
        if self.cross_attention_depth < 1:
            raise ConfigError(
                f"cross_attention_depth must be >= 1, got {self.cross_attention_depth}"
            )


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 2
    embed_dim: int = 24
    num_heads: int = 4
    depths: Depths = (2, 2, 2, 2)
    window_size: int = 7
    fusion_kernels: Kernels = (1, 3, 5)
    conv_stem_channels: int = 16
    num_input_channels_per_modality: int = 1
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    relative_position_bias: bool = True
    drop_path: float = 0.0
    msif: MsifConfig = field(default_factory=MsifConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "fusion_kernels", tuple(int(k) for k in self.fusion_kernels))
        if isinstance(self.msif, dict):
            object.__setattr__(self, "msif", MsifConfig(**self.msif))

        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be four positive integers, got {self.depths}")
        if self.num_heads < 1 or self.embed_dim < 1:
            raise ConfigError(f"Invalid {self.embed_dim=} / {self.num_heads=}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) is not divisible by num_heads ({self.num_heads})"
            )
        if not self.fusion_kernels:
            raise ConfigError("At least one fusion kernel is required")
        even = [k for k in self.fusion_kernels if k < 1 or k % 2 == 0]
        if even:
            raise ConfigError(f"Fusion kernels must be positive and odd, got {even}")
        if self.conv_stem_channels < 1 or self.num_input_channels_per_modality < 1:
            raise ConfigError("Channel counts must be positive")
        if not 0 <= self.drop_path < 1:
            raise ConfigError(f"drop_path must lie in [0, 1), got {self.drop_path}")

    def stage_channels(self) -> tuple[int, int, int, int]:
        """Channels of the four pyramid outputs: 2C, 4C, 8C, 16C."""
        c = self.embed_dim
        return (2 * c, 4 * c, 8 * c, 16 * c)

    def embedding_grid(self, input_shape: Grid) -> Grid:
        p = self.patch_size
        h, w, d = (-(-n // p) for n in input_shape)
        return (h, w, d)

    def pyramid_shapes(self, input_shape: Grid) -> list[Grid]:
        """Spatial shapes of the four pyramid outputs for a given input grid."""
        grid = self.embedding_grid(input_shape)
        shapes = []
        for _ in range(4):
            h, w, d = (-(-n // 2) for n in grid)
            grid = (h, w, d)
            shapes.append(grid)
        return shapes

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, mapping: dict[str, Any]) -> "ModelConfig":
        mapping = _from_mapping(cls, mapping, "model")
        if "msif" in mapping and isinstance(mapping["msif"], dict):
            mapping["msif"] = MsifConfig(**_from_mapping(MsifConfig, mapping["msif"], "msif"))
        return cls(**mapping)

    @classmethod
    def from_sections(
        cls, model: dict[str, Any], msif: dict[str, Any]
    ) -> "ModelConfig":
        """Builds the configuration from the `model` and `msif` sections of a config file."""
        msif = dict(msif)
        kernels = msif.pop("kernels", None)
        mapping = dict(model)
        if kernels is not None:
            mapping["fusion_kernels"] = kernels
        mapping["msif"] = msif
        return cls.from_dict(mapping)


def volume_to_tensor(
    v: Volume3D, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Lifts a volume to a (1, 1, H, W, D) tensor."""
    return torch.as_tensor(np.ascontiguousarray(v.data), dtype=dtype)[None, None]


def tensor_to_volume(t: torch.Tensor, like: Volume3D, modality: Modality) -> Volume3D:
    """Wraps the single-sample, single-channel tensor `t` with the geometry of `like`."""
    array = t.detach().cpu().reshape(t.shape[-3:]).numpy()
    return like.with_data(array, modality=modality)
