import logging
from collections.abc import Callable
from itertools import combinations
from typing import Any, Iterable, Iterator, TypeVar

from fuseg3d import VERBOSE
from fuseg3d.errors import ParameterError

logger = logging.getLogger(__name__)


T = TypeVar("T")


def all_lengths_combinations(iterable: Iterable[T]) -> Iterator[tuple[T, ...]]:
    """Yields every non-empty combination of `iterable`, shortest first.

    For the fusion modules `["MSF", "CMA", "GFM"]` that is `("MSF",)`, `("CMA",)`,
    `("GFM",)`, `("MSF", "CMA")`, `("MSF", "GFM")`, `("CMA", "GFM")` and finally
    `("MSF", "CMA", "GFM")`; input order is kept within each combination.
    """
    items = list(iterable)
    for i in range(1, len(items) + 1):
        for item in combinations(items, r=i):
            logger.log(level=VERBOSE, msg=f"Combination: {item}")
            yield item


def apply_to_all(dictionary: dict[Any, Any], func: Callable[[Any], Any]) -> Any:
    """Recursively apply a callable to all leaf values of a dictionary."""
    if isinstance(dictionary, dict):
        return {k: apply_to_all(v, func) for k, v in dictionary.items()}
    return func(dictionary)


def merge(base: dict[Any, Any], override: dict[Any, Any]) -> dict[Any, Any]:
    """Recursively merges `override` over `base`, returning a new dictionary.

    Nested dictionaries are merged key by key, anything else in `override` wins.
    """
    merged: dict[Any, Any] = {}
    for key in [*base, *(k for k in override if k not in base)]:
        if key in base and key in override:
            b, o = base[key], override[key]
            merged[key] = merge(b, o) if isinstance(b, dict) and isinstance(o, dict) else o
        elif key in override:
            merged[key] = override[key]
        else:
            b = base[key]
            merged[key] = merge(b, {}) if isinstance(b, dict) else b
    return merged


def window_offsets(length: int, depth: int, stride: int) -> list[int]:
    """Start offsets of windows of `depth` slices covering `length` slices.

    Windows advance by `stride`; the last window is aligned to the end so that every
    slice is covered. A `length` shorter than `depth` yields the single offset 0 (the
    caller pads).

    Examples: 96 slices, depth 32, stride 32 -> [0, 32, 64]; 100 slices -> [0, 32, 64, 68].
    """
    if depth < 1 or stride < 1:
        raise ParameterError(f"Window depth and stride must be positive, got {depth=}, {stride=}")
    if length <= depth:
        return [0]

    offsets = list(range(0, length - depth + 1, stride))
    if offsets[-1] != length - depth:
        offsets.append(length - depth)
    logger.log(level=VERBOSE, msg=f"Window offsets for {length=}, {depth=}, {stride=}: {offsets}")
    return offsets
