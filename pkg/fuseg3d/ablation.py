"""Sweeps over architecture settings and fusion-module toggles on phantom data."""

import logging
from dataclasses import replace
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from fuseg3d.core import ModelConfig
from fuseg3d.data import cases_from_phantoms
from fuseg3d.decoder import SegmentationModel, count_parameters
from fuseg3d.errors import ConfigError
from fuseg3d.evaluation import evaluate
from fuseg3d.iteration import all_lengths_combinations
from fuseg3d.phantoms import PhantomSpec, generate_cohort
from fuseg3d.preprocess import PreprocessConfig
from fuseg3d.training import TrainConfig, train

logger = logging.getLogger(__name__)

MODULES = ("MSF", "CMA", "GFM")

AXIS_VALUES: dict[str, tuple[Any, ...]] = {
    "heads": (2, 4, 8, 16),
    "depths": ((2, 2, 2, 2), (2, 4, 6, 8), (3, 6, 9, 18)),
    "embed_dim": (12, 24, 48, 96),
}


def _variant_name(modules: tuple[str, ...]) -> str:
    if not modules:
        return "Baseline"
    if set(modules) == set(MODULES):
        return "Full"
    # Gating acts across scales, so it always comes with multi-scale fusion.
    shown = [m for m in modules if not (m == "MSF" and "GFM" in modules)]
    return "+".join(shown)


def module_variants() -> dict[str, tuple[str, ...]]:
    """The module-study wirings, from the single-scale baseline to the full model.

    Gated fusion is only combined with multi-scale fusion; the `GFM` variant therefore
    enables both.
    """
    variants: dict[str, tuple[str, ...]] = {"Baseline": ()}
    for combination in all_lengths_combinations(MODULES):
        if "GFM" in combination and "MSF" not in combination:
            continue
        variants[_variant_name(combination)] = combination
    return variants


def with_modules(base: ModelConfig, modules: tuple[str, ...]) -> ModelConfig:
    msif = replace(
        base.msif,
        multiscale="MSF" in modules,
        cross_attention="CMA" in modules,
        gated="GFM" in modules,
    )
    return replace(base, msif=msif)


AXES = (*AXIS_VALUES, "msif_modules")


def variant_configs(
    base: ModelConfig, axis: str, values: Optional[Sequence[Any]] = None
) -> list[tuple[str, ModelConfig]]:
    """Labelled model configurations along one ablation axis.

    Args:
        base: Settings kept fixed.
        axis: One of `heads`, `depths`, `embed_dim`, `msif_modules`.
        values: Subset of the axis' allowed values (variant names for `msif_modules`);
            all of them by default.

    Raises:
        ConfigError: Unknown axis, disallowed value, or a value incompatible with `base`
            (e.g. a head count not dividing the embedding dimension).
    """
    if axis == "msif_modules":
        variants = module_variants()
        chosen = list(variants) if values is None else list(values)
        unknown = [v for v in chosen if v not in variants]
        if unknown:
            raise ConfigError(f"Unknown module variants {unknown}, choose from {list(variants)}")
        return [(name, with_modules(base, variants[name])) for name in chosen]

    if axis not in AXIS_VALUES:
        raise ConfigError(f"Unknown ablation axis {axis!r}, choose from {list(AXES)}")
    allowed = AXIS_VALUES[axis]
    chosen = list(allowed) if values is None else [tuple(v) if isinstance(v, list) else v for v in values]
    invalid = [v for v in chosen if v not in allowed]
    if invalid:
        raise ConfigError(f"Values {invalid} not allowed on axis {axis!r}, choose from {list(allowed)}")

    field_name = "num_heads" if axis == "heads" else axis
    return [(str(v), replace(base, **{field_name: v})) for v in chosen]


def ablation_sweep(
    base: ModelConfig,
    axis: str,
    train_cfg: TrainConfig,
    phantom: PhantomSpec,
    num_phantoms: int = 2,
    values: Optional[Sequence[Any]] = None,
) -> pd.DataFrame:
    """Trains and scores every variant along `axis` on the same phantoms.

    The last phantom is held out for scoring unless there is only one. Every variant
    starts from the same seed.

    Returns:
        One row per variant: label, the module switches, parameter count, final training
        loss and the mean DSC, sensitivity and precision.
    """
    variants = variant_configs(base, axis, values)
    if num_phantoms < 1:
        raise ConfigError(f"Need at least one phantom, got {num_phantoms}")

    h, w, _ = phantom.shape
    if h != w:
        raise ConfigError(f"Phantoms for sweeps must be square in-plane, got {phantom.shape}")
    geometry = PreprocessConfig(target_inplane=h, crop_inplane=h)
    cases = cases_from_phantoms(generate_cohort(phantom, num_phantoms), geometry)
    train_cases, test_cases = (cases[:-1], cases[-1:]) if len(cases) > 1 else (cases, cases)

    rows = []
    for label, cfg in variants:
        torch.manual_seed(train_cfg.seed)
        model = SegmentationModel(cfg)
        parameters = count_parameters(model)
        logger.info(f"Ablation {axis}={label}: {parameters} parameters")

        result = train(model, train_cases, train_cfg)
        scores = evaluate(model, test_cases, depth=train_cfg.window_depth, stride=train_cfg.stride).scores
        rows.append(
            {
                "axis": axis,
                "variant": label,
                "MSF": cfg.msif.multiscale,
                "CMA": cfg.msif.cross_attention,
                "GFM": cfg.msif.gated,
                "parameters": parameters,
                "final_loss": result.history[-1]["loss"] if result.history else float("nan"),
                "DSC": float(np.mean([s.dsc for s in scores])),
                "sensitivity": float(np.mean([s.sensitivity for s in scores])),
                "precision": float(np.mean([s.precision for s in scores])),
            }
        )
    return pd.DataFrame(rows)
