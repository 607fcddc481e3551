import logging
from pathlib import Path

_PACKAGE_ROOT = Path(__file__).parent
_RESOURCES = _PACKAGE_ROOT / "resources"

VERBOSE = logging.DEBUG - 1  # A level below even debug, logging's lowest

PatientID = str
Grid = tuple[int, int, int]
Spacing = tuple[float, float, float]
Shift = tuple[int, int, int]
Kernels = tuple[int, ...]
Depths = tuple[int, int, int, int]
# Raw JSON configuration, as read from disk.
ConfigMapping = dict[str, dict[str, object]]
