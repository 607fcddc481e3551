import gzip
import json
import logging
import zipfile
import zlib
from functools import cache, partial
from pathlib import Path
from typing import Any, Optional, Union

import nibabel as nib
import numpy as np
import torch
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from fuseg3d import _RESOURCES, ConfigMapping
from fuseg3d.core import Modality, Volume3D
from fuseg3d.errors import ConfigError, MetadataError
from fuseg3d.iteration import apply_to_all, merge

logger = logging.getLogger(__name__)


# Be explicit about encoding, since Windows might default to something other than UTF8.
# Provide this globally so no spot is forgotten.
_ENCODING = "utf8"
open_with_encoding = partial(open, encoding=_ENCODING)

CHECKPOINT_FORMAT_VERSION = 1
_NIFTI_SUFFIXES = (".nii", ".nii.gz")
_RAW_SUFFIX = ".npz"


def _tuplify(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def read_json(file: Path) -> Any:
    with open_with_encoding(file) as f:
        content = json.load(f)
    logger.debug(f"Read JSON from {file}")
    return content


def write_json(content: Any, file: Path) -> None:
    with open_with_encoding(file, "w") as f:
        json.dump(content, f, indent=4)
    logger.debug(f"Wrote JSON to {file}")


@cache
def get_defaults() -> ConfigMapping:
    """Provides the packaged default configuration, one mapping per section."""
    defaults: ConfigMapping = apply_to_all(read_json(_RESOURCES / "defaults.json"), _tuplify)
    return defaults


def load_config(path: Optional[Path] = None) -> ConfigMapping:
    """Reads a user configuration and merges it over the packaged defaults.

    Args:
        path: JSON file with any subset of the sections `preprocess`, `model`, `msif`,
            `train` and `phantom`. `None` yields the defaults.

    Returns:
        The complete configuration.
    """
    defaults = get_defaults()
    if path is None:
        return merge(defaults, {})

    try:
        user = read_json(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration file {path} is not valid JSON: {e}") from e

    if not isinstance(user, dict):
        raise ConfigError(f"Configuration file {path} must hold a JSON object")
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"Unknown configuration sections: {sorted(unknown)}")

    config: ConfigMapping = merge(defaults, apply_to_all(user, _tuplify))
    logger.debug(f"Resolved configuration from {path}: {config}")
    return config


def sidecar_path(path: Path) -> Path:
    """`pet.nii.gz` -> `pet.json`."""
    name = path.name
    for suffix in (*_NIFTI_SUFFIXES[::-1], _RAW_SUFFIX):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".json")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(_NIFTI_SUFFIXES)


def save_volume(v: Volume3D, path: Path) -> None:
    """Writes a volume as NIfTI-1 (with a JSON sidecar) or as the raw `.npz` container.

    Raises:
        OSError: The location is not writable.
        ValueError: Unsupported file suffix.
    """
    data = v.data.astype(np.uint8) if v.modality is Modality.MASK else v.data
    meta = {"modality": v.modality.value, "patient_id": v.patient_id}

    if _is_nifti(path):
        affine = np.diag([*v.spacing_mm, 1.0])
        image = nib.Nifti1Image(np.asarray(data), affine)
        image.header.set_zooms(v.spacing_mm)
        nib.save(image, path)
        write_json(meta, sidecar_path(path))
    elif path.suffix == _RAW_SUFFIX:
        with open(path, "wb") as f:
            np.savez(
                f,
                data=np.asarray(data),
                spacing=np.asarray(v.spacing_mm, dtype=np.float64),
                meta=np.asarray(json.dumps(meta)),
            )
    else:
        raise ValueError(f"Unsupported volume file type: {path}")
    logger.info(f"Saved {v.modality.value} volume {v.shape} to {path}")


def _load_nifti(path: Path) -> tuple[np.ndarray, tuple[float, ...], dict[str, Any]]:
    try:
        image = nib.load(path)
        zooms = tuple(float(z) for z in image.header.get_zooms()[:3])
        data = np.asanyarray(image.dataobj)
    except (ImageFileError, HeaderDataError, ValueError, EOFError, gzip.BadGzipFile, zlib.error) as e:
        raise MetadataError(f"Cannot read NIfTI header of {path}: {e}") from e

    sidecar = sidecar_path(path)
    meta = read_json(sidecar) if sidecar.exists() else {}
    return data, zooms, meta


def _load_raw(path: Path) -> tuple[np.ndarray, tuple[float, ...], dict[str, Any]]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            data = archive["data"]
            zooms = tuple(float(s) for s in archive["spacing"])
            meta = json.loads(str(archive["meta"]))
    except (ValueError, KeyError, EOFError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise MetadataError(f"Cannot read raw volume container {path}: {e}") from e
    return data, zooms, meta


def load_volume(
    path: Path,
    modality: Optional[Union[Modality, str]] = None,
    patient_id: Optional[str] = None,
) -> Volume3D:
    """Reads a volume written by `save_volume` or any NIfTI-1 file.

    Args:
        path: File to read.
        modality: Overrides or supplies the modality if the sidecar lacks it.
        patient_id: Overrides the sidecar patient ID.

    Returns:
        The volume, spacing taken from the file header.

    Raises:
        FileNotFoundError: `path` does not exist.
        MetadataError: Unreadable header, unusable spacing or unknown modality.
    """
    if not path.exists():
        raise FileNotFoundError(f"No volume at {path}")

    if _is_nifti(path):
        data, zooms, meta = _load_nifti(path)
    elif path.suffix == _RAW_SUFFIX:
        data, zooms, meta = _load_raw(path)
    else:
        raise MetadataError(f"Unsupported volume file type: {path}")

    if len(zooms) != 3 or not all(z > 0 for z in zooms):
        raise MetadataError(f"{path} carries no usable spacing: {zooms}")

    resolved = modality if modality is not None else meta.get("modality")
    if resolved is None:
        raise MetadataError(f"Modality of {path} unknown: no sidecar entry and no flag")
    try:
        resolved = Modality(resolved)
    except ValueError as e:
        raise MetadataError(f"Unknown modality {resolved!r} for {path}") from e

    pid = patient_id if patient_id is not None else str(meta.get("patient_id", ""))
    sx, sy, sz = zooms
    v = Volume3D(data=data, spacing_mm=(sx, sy, sz), modality=resolved, patient_id=pid)
    logger.debug(f"Loaded {resolved.value} volume {v.shape} at {v.spacing_mm} mm from {path}")
    return v


def save_checkpoint(
    path: Path,
    model_config: dict[str, Any],
    state_dict: dict[str, torch.Tensor],
    optimizer: Optional[dict[str, Any]] = None,
    scheduler: Optional[dict[str, Any]] = None,
    step: int = 0,
    history: Optional[list[dict[str, float]]] = None,
) -> None:
    """Writes a self-describing checkpoint.

    The archive maps hierarchical parameter names to tensors and carries the model
    configuration, so a model can be rebuilt from the file alone.
    """
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model_config,
        "state_dict": state_dict,
        "optimizer": optimizer,
        "scheduler": scheduler,
        "step": step,
        "history": history or [],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    logger.info(f"Saved checkpoint at step {step} to {path}")


def load_checkpoint(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"No checkpoint at {path}")
    try:
        payload: dict[str, Any] = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, zipfile.BadZipFile, ValueError) as e:
        raise MetadataError(f"Cannot read checkpoint {path}: {e}") from e

    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise MetadataError(
            f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload
