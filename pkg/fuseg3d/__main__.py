#!/bin/env python3

"""Dual-modality PET/CT lesion segmentation with shifted-window encoders and
multi-scale information fusion.

Trains and evaluates the network under patient-level cross-validation, segments new
PET/CT pairs, quantifies total metabolic tumour volume (TMTV) and its agreement with the
ground truth, generates synthetic phantoms and runs architecture ablations.

Without a data directory, commands work on phantoms drawn from the `phantom` section of
the configuration.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, NamedTuple, Optional

import torch

from fuseg3d.ablation import AXES, ablation_sweep
from fuseg3d.core import AcquisitionMeta, ModelConfig, Modality, Volume3D
from fuseg3d.data import (
    Case,
    cases_from_phantoms,
    load_case_volume,
    load_cases,
    make_folds,
    prepare_case,
    validation_ids,
    write_cases,
)
from fuseg3d.decoder import SegmentationModel
from fuseg3d.errors import ConfigError, DataError, FusegError, StatisticsError
from fuseg3d.evaluation import evaluate, predict_volume
from fuseg3d.io import load_config, read_json, save_volume, write_json
from fuseg3d.metrics import binarize
from fuseg3d.phantoms import PhantomSpec, generate_cohort
from fuseg3d.preprocess import PreprocessConfig
from fuseg3d.tmtv import TMTVRecord, emit_fold_reports, read_records_csv, tmtv, write_records_csv
from fuseg3d.training import TrainConfig, model_from_checkpoint, train

logger = logging.getLogger(__name__)

DEFAULT_PHANTOMS = 10


class Settings(NamedTuple):
    preprocess: PreprocessConfig
    model: ModelConfig
    train: TrainConfig
    phantom: PhantomSpec


def settings(path: Optional[Path]) -> Settings:
    config = load_config(path)
    return Settings(
        preprocess=PreprocessConfig.from_mapping(dict(config["preprocess"])),
        model=ModelConfig.from_sections(dict(config["model"]), dict(config["msif"])),
        train=TrainConfig.from_mapping(dict(config["train"])),
        phantom=PhantomSpec.from_mapping(dict(config["phantom"])),
    )


def parse(args: Optional[list[str]], description: str) -> dict[str, Any]:
    """Prepares, runs and returns parsing of CLI arguments for the script."""
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument(
        "--debug",
        help="Output detailed logging information.",
        action="store_true",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        help="Output progress information.",
        action="store_true",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--config",
            help="JSON configuration, merged over the packaged defaults.",
            type=Path,
        )

    def with_data(sub: argparse.ArgumentParser) -> None:
        sub.add_argument(
            "--data",
            help="Directory of `<patient_id>/{pet,ct,mask}.nii.gz` cases. Phantoms if omitted.",
            type=Path,
        )
        sub.add_argument(
            "--phantoms",
            help="Number of phantoms to use when no data directory is given.",
            type=int,
            default=DEFAULT_PHANTOMS,
        )

    sub = commands.add_parser("train", help="Train on the training patients of one fold.")
    with_config(sub)
    with_data(sub)
    sub.add_argument("--fold", help="Cross-validation fold to train.", type=int, default=0)
    sub.add_argument("--out", help="Output directory for checkpoints.", type=Path, default=Path("runs"))
    sub.add_argument("--resume", help="Checkpoint to continue from.", type=Path)

    sub = commands.add_parser("infer", help="Segment one PET/CT pair.")
    with_config(sub)
    sub.add_argument("--ckpt", help="Model checkpoint.", type=Path, required=True)
    sub.add_argument("--pet", help="PET volume (raw with --meta, SUV otherwise).", type=Path, required=True)
    sub.add_argument("--ct", help="CT volume in HU.", type=Path, required=True)
    sub.add_argument("--meta", help="Acquisition parameters of a raw PET, as JSON.", type=Path)
    sub.add_argument("--out", help="Where to write the probability map.", type=Path, required=True)
    sub.add_argument(
        "--mask",
        help="Write the binarized mask instead of probabilities.",
        action="store_true",
    )

    sub = commands.add_parser("eval", help="Score a checkpoint against ground truth.")
    with_config(sub)
    with_data(sub)
    sub.add_argument("--ckpt", help="Model checkpoint.", type=Path, required=True)
    sub.add_argument(
        "--fold",
        help="Evaluate only the test patients of this fold. All patients if omitted.",
        type=int,
    )
    sub.add_argument("--out", help="Output directory for CSVs and plots.", type=Path, default=Path("eval"))

    sub = commands.add_parser("tmtv", help="TMTV agreement between predicted and reference masks.")
    sub.add_argument("--pred-dir", help="Predicted masks or probability maps.", type=Path)
    sub.add_argument("--gt-dir", help="Reference masks, named as in --pred-dir.", type=Path)
    sub.add_argument("--records", help="Existing TMTV records CSV instead of mask directories.", type=Path)
    sub.add_argument("--out", help="Output directory for CSVs and plots.", type=Path, default=Path("tmtv"))

    sub = commands.add_parser("phantom", help="Write synthetic PET/CT/mask cases.")
    with_config(sub)
    sub.add_argument("--spec", help="JSON phantom parameters, overriding the configuration.", type=Path)
    sub.add_argument("--count", help="Number of phantoms.", type=int, default=1)
    sub.add_argument("--out", help="Output data directory.", type=Path, default=Path("phantoms"))

    sub = commands.add_parser("ablate", help="Sweep one architecture axis on phantoms.")
    with_config(sub)
    sub.add_argument("--axis", help="Ablation axis.", choices=AXES, required=True)
    sub.add_argument("--steps", help="Training steps per variant.", type=int)
    sub.add_argument("--phantoms", help="Number of phantoms.", type=int, default=2)
    sub.add_argument("--out", help="Output directory for the report.", type=Path, default=Path("ablation"))

    return vars(parser.parse_args(args=args))


def _cases(args: dict[str, Any], s: Settings, require_mask: bool = True) -> list[Case]:
    if args["data"] is not None:
        return load_cases(args["data"], s.preprocess, require_mask=require_mask)
    logger.info(f"No data directory given, using {args['phantoms']} phantoms")
    return cases_from_phantoms(generate_cohort(s.phantom, args["phantoms"]), s.preprocess)


def _fold(cases: list[Case], s: Settings, index: int) -> tuple[list[Case], list[Case]]:
    folds = make_folds([c.patient_id for c in cases], s.train.folds, s.train.seed)
    if not 0 <= index < len(folds):
        raise ConfigError(f"Fold {index} does not exist, choose from 0 to {len(folds) - 1}")
    fold = folds[index]
    by_id = {c.patient_id: c for c in cases}
    return [by_id[p] for p in fold.train_patient_ids], [by_id[p] for p in fold.test_patient_ids]


def run_train(args: dict[str, Any]) -> None:
    s = settings(args["config"])
    cases = _cases(args, s)
    train_cases, _ = _fold(cases, s, args["fold"])
    fit_ids, val_ids = validation_ids(
        tuple(c.patient_id for c in train_cases), seed=s.train.seed
    )
    fit_cases = [c for c in train_cases if c.patient_id in fit_ids]
    val_cases = [c for c in train_cases if c.patient_id in val_ids]

    out_dir: Path = args["out"] / f"fold{args['fold']}"
    torch.manual_seed(s.train.seed)
    model = SegmentationModel(s.model)
    result = train(model, fit_cases, s.train, out_dir=out_dir, val_cases=val_cases, resume=args["resume"])
    write_json(result.history, out_dir / "history.json")

    sys.stdout.write(
        f"Fold {args['fold']}: {result.steps} steps, best validation DSC {result.best_val_dsc:.4f}\n"
        f"Best checkpoint: {result.best_checkpoint}\nLast checkpoint: {result.last_checkpoint}\n"
    )


def _input_volume(path: Path, fallback: Modality) -> Volume3D:
    return load_case_volume(path, fallback, patient_id=path.name.split(".")[0])


def run_infer(args: dict[str, Any]) -> None:
    s = settings(args["config"])
    meta = AcquisitionMeta.from_json(read_json(args["meta"])) if args["meta"] else None
    pet = _input_volume(args["pet"], Modality.PET_RAW if meta else Modality.PET_SUV)
    ct = _input_volume(args["ct"], Modality.CT_HU)
    case = prepare_case(pet, ct, None, meta, s.preprocess)

    model = model_from_checkpoint(args["ckpt"])
    prob = predict_volume(model, case.pet, case.ct, s.train.window_depth, s.train.stride)
    out = binarize(prob) if args["mask"] else prob
    save_volume(out, args["out"])
    sys.stdout.write(f"Wrote {out.modality.value} volume {out.shape} to {args['out']}\n")


def _report(records: list[TMTVRecord], out_dir: Path) -> None:
    if len(records) < 3:
        logger.warning(f"Only {len(records)} TMTV records, skipping agreement statistics")
        return
    try:
        pooled = emit_fold_reports(records, out_dir)["pooled"]
    except StatisticsError as e:
        logger.warning(f"No agreement statistics: {e}")
        return
    sys.stdout.write(
        f"TMTV agreement over {pooled.n} patients: slope {pooled.slope:.4f}, "
        f"intercept {pooled.intercept:.4f}, R² {pooled.r_squared:.4f}, r {pooled.pearson_r:.4f}, "
        f"bias {pooled.mean_diff:.4f} mL, limits [{pooled.loa_low:.4f}, {pooled.loa_high:.4f}] mL\n"
    )


def run_eval(args: dict[str, Any]) -> None:
    s = settings(args["config"])
    cases = _cases(args, s)
    fold_index = 0
    if args["fold"] is not None:
        fold_index = args["fold"]
        _, cases = _fold(cases, s, fold_index)

    model = model_from_checkpoint(args["ckpt"])
    result = evaluate(
        model, cases, s.train.window_depth, s.train.stride, fold_index=fold_index, out_dir=args["out"]
    )
    sys.stdout.write(result.table.to_string(index=False) + "\n")
    _report(result.records, args["out"])


def _mask_files(directory: Path) -> dict[str, Path]:
    files = {}
    for path in sorted(directory.iterdir()):
        if path.name.endswith((".nii", ".nii.gz", ".npz")):
            files[path.name.split(".")[0]] = path
    return files


def _as_mask(path: Path, patient_id: str) -> Volume3D:
    v = load_case_volume(path, Modality.MASK, patient_id)
    if v.modality is Modality.PROB:
        return binarize(v)
    if v.modality is not Modality.MASK:
        raise DataError(f"{path} holds a {v.modality.value} volume, expected a mask")
    return v


def run_tmtv(args: dict[str, Any]) -> None:
    out_dir: Path = args["out"]
    if args["records"] is not None:
        records = read_records_csv(args["records"])
    else:
        if args["pred_dir"] is None or args["gt_dir"] is None:
            raise ConfigError("Either --records or both --pred-dir and --gt-dir are required")
        for directory in (args["pred_dir"], args["gt_dir"]):
            if not directory.is_dir():
                raise FileNotFoundError(f"No directory at {directory}")
        predicted, reference = _mask_files(args["pred_dir"]), _mask_files(args["gt_dir"])
        missing = sorted(set(predicted) - set(reference))
        if missing:
            raise DataError(f"No reference masks for {missing}")

        records = [
            TMTVRecord(pid, ctmtv=tmtv(_as_mask(path, pid)), gtmtv=tmtv(_as_mask(reference[pid], pid)))
            for pid, path in predicted.items()
        ]
        out_dir.mkdir(parents=True, exist_ok=True)
        write_records_csv(records, out_dir / "tmtv_records.csv")

    _report(records, out_dir)


def run_phantom(args: dict[str, Any]) -> None:
    s = settings(args["config"])
    spec = s.phantom
    if args["spec"] is not None:
        overrides = read_json(args["spec"])
        spec = PhantomSpec.from_mapping({**vars(spec), **overrides})
    if args["count"] < 1:
        raise ConfigError(f"--count must be positive, got {args['count']}")

    written = write_cases(generate_cohort(spec, args["count"]), args["out"])
    for path in written:
        sys.stdout.write(f"{path}\n")


def run_ablate(args: dict[str, Any]) -> None:
    s = settings(args["config"])
    train_cfg = s.train
    if args["steps"] is not None:
        train_cfg = TrainConfig.from_mapping(
            {**vars(train_cfg), "max_steps": args["steps"], "eval_every": args["steps"]}
        )

    table = ablation_sweep(s.model, args["axis"], train_cfg, s.phantom, num_phantoms=args["phantoms"])
    out_dir: Path = args["out"]
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / f"ablation_{args['axis']}.csv", index=False)
    sys.stdout.write(table.to_string(index=False) + "\n")


COMMANDS: dict[str, Callable[[dict[str, Any]], None]] = {
    "train": run_train,
    "infer": run_infer,
    "eval": run_eval,
    "tmtv": run_tmtv,
    "phantom": run_phantom,
    "ablate": run_ablate,
}


def main(raw_args: Optional[list[str]] = None) -> None:
    args = parse(args=raw_args, description=__doc__)

    if args["debug"]:
        # Leave at default if no logging/debugging requested.
        logging.basicConfig(level="DEBUG")
    elif args["verbose"]:
        logging.basicConfig(level="INFO")

    try:
        COMMANDS[args["command"]](args)
    except FusegError as e:
        sys.stderr.write(f"{type(e).__name__}: {e}\n")
        sys.exit(e.exit_code)
    except OSError as e:
        sys.stderr.write(f"{type(e).__name__}: {e}\n")
        sys.exit(DataError.exit_code)


if __name__ == "__main__":
    main()
