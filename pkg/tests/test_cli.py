import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from _pytest.capture import CaptureFixture

from fuseg3d.__main__ import main
from fuseg3d.core import Modality, Volume3D
from fuseg3d.data import CT_FILE, MASK_FILE, PET_FILE
from fuseg3d.io import load_volume, save_volume

TINY = {
    "preprocess": {"target_inplane": 16, "crop_inplane": 16},
    "model": {
        "embed_dim": 8,
        "num_heads": 2,
        "depths": [1, 1, 1, 1],
        "window_size": 2,
        "conv_stem_channels": 4,
        "mlp_ratio": 2.0,
    },
    "msif": {"kernels": [1, 3], "reduction_ratio": 2, "spatial_kernel": 3},
    "train": {"window_depth": 16, "max_steps": 2, "eval_every": 2, "lr": 0.01},
    "phantom": {
        "shape": [16, 16, 16],
        "spacing_mm": [4.0, 4.0, 3.0],
        "num_lesions": 1,
        "semi_axes_range": [2.0, 4.0],
        "noise_sigma": 0.05,
    },
}


@pytest.fixture
def config_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture
def checkpoint(config_file: Path, tmp_path: Path) -> Path:
    main(["train", "--config", str(config_file), "--phantoms", "5", "--out", str(tmp_path / "runs")])
    return tmp_path / "runs" / "fold0" / "last.pt"


def _exit_code(args: list[str]) -> int:
    with pytest.raises(SystemExit) as e:
        main(args)
    return int(e.value.code)


@pytest.mark.parametrize(
    ["option"],
    [("-h",), ("--help",)],
)
def test_help_option(capsys: CaptureFixture, option: str):
    try:
        main([option])
    except SystemExit:
        pass

    output = capsys.readouterr().out

    assert "Dual-modality PET/CT lesion segmentation" in output
    for command in ("train", "infer", "eval", "tmtv", "phantom", "ablate"):
        assert command in output


def test_phantom_command(config_file: Path, tmp_path: Path, capsys: CaptureFixture):
    out = tmp_path / "phantoms"
    main(["phantom", "--config", str(config_file), "--count", "2", "--out", str(out)])

    printed = capsys.readouterr().out.splitlines()
    assert printed == [str(out / "phantom-000"), str(out / "phantom-001")]
    for name in (PET_FILE, CT_FILE, MASK_FILE):
        assert (out / "phantom-001" / name).exists()
    assert load_volume(out / "phantom-000" / PET_FILE).shape == (16, 16, 16)


def test_phantom_command_spec_overrides(config_file: Path, tmp_path: Path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"shape": [16, 16, 10], "seed": 4}))
    main(["phantom", "--config", str(config_file), "--spec", str(spec), "--out", str(tmp_path)])
    assert load_volume(tmp_path / "phantom-004" / MASK_FILE).shape == (16, 16, 10)


def test_train_command(config_file: Path, tmp_path: Path, capsys: CaptureFixture):
    main(["train", "--config", str(config_file), "--phantoms", "5", "--out", str(tmp_path / "runs")])

    fold_dir = tmp_path / "runs" / "fold0"
    assert (fold_dir / "last.pt").exists()
    assert (fold_dir / "best.pt").exists()
    history = json.loads((fold_dir / "history.json").read_text())
    assert [h["step"] for h in history] == [1.0, 2.0]
    assert "Fold 0: 2 steps" in capsys.readouterr().out


def test_eval_command(checkpoint: Path, config_file: Path, tmp_path: Path, capsys: CaptureFixture):
    capsys.readouterr()
    out = tmp_path / "eval"
    main(
        [
            "eval",
            "--config",
            str(config_file),
            "--phantoms",
            "5",
            "--ckpt",
            str(checkpoint),
            "--fold",
            "0",
            "--out",
            str(out),
        ]
    )

    table = pd.read_csv(out / "metrics.csv")
    assert table["patient_id"].tolist()[-1] == "mean"
    assert len(table) == 2
    assert "DSC" in capsys.readouterr().out
    assert (out / "tmtv_records.csv").exists()


@pytest.mark.parametrize(["flags", "modality"], [([], Modality.PROB), (["--mask"], Modality.MASK)])
def test_infer_command(checkpoint: Path, config_file: Path, tmp_path: Path, flags, modality):
    data = tmp_path / "phantoms"
    main(["phantom", "--config", str(config_file), "--out", str(data)])
    out = tmp_path / "prediction.nii.gz"
    main(
        [
            "infer",
            "--config",
            str(config_file),
            "--ckpt",
            str(checkpoint),
            "--pet",
            str(data / "phantom-000" / PET_FILE),
            "--ct",
            str(data / "phantom-000" / CT_FILE),
            "--out",
            str(out),
            *flags,
        ]
    )
    prediction = load_volume(out)
    assert prediction.modality is modality
    assert prediction.shape == (16, 16, 16)


def test_tmtv_command_from_records(tmp_path: Path, capsys: CaptureFixture):
    records = tmp_path / "records.csv"
    records.write_text(
        "patient_id,fold,cTMTV_mL,gTMTV_mL\n"
        "a,0,10.0,12.0\nb,0,20.0,19.0\nc,1,31.0,30.0\nd,1,40.0,44.0\ne,1,5.0,4.0\n"
    )
    main(["tmtv", "--records", str(records), "--out", str(tmp_path / "tmtv")])

    assert "TMTV agreement over 5 patients" in capsys.readouterr().out
    for name in ("pooled_regression.png", "pooled_bland_altman.png", "pooled_agreement.json", "fold1_regression.png"):
        assert (tmp_path / "tmtv" / name).exists()


def test_tmtv_command_from_masks(tmp_path: Path, capsys: CaptureFixture):
    pred_dir, gt_dir = tmp_path / "pred", tmp_path / "gt"
    pred_dir.mkdir()
    gt_dir.mkdir()
    for i, size in enumerate((2, 3, 4, 5)):
        gt = np.zeros((8, 8, 8), dtype=np.uint8)
        gt[:size, :size, :size] = 1
        pred = np.zeros((8, 8, 8))
        pred[: size + 1, :size, :size] = 0.9
        save_volume(Volume3D(gt, (2.0, 2.0, 2.0), Modality.MASK, f"p{i}"), gt_dir / f"p{i}.nii.gz")
        save_volume(Volume3D(pred, (2.0, 2.0, 2.0), Modality.PROB, f"p{i}"), pred_dir / f"p{i}.nii.gz")

    main(["tmtv", "--pred-dir", str(pred_dir), "--gt-dir", str(gt_dir), "--out", str(tmp_path / "tmtv")])

    table = pd.read_csv(tmp_path / "tmtv" / "tmtv_records.csv", dtype={"patient_id": str})
    assert table["patient_id"].tolist() == ["p0", "p1", "p2", "p3"]
    assert table["gTMTV_mL"].tolist() == pytest.approx([s**3 * 8 / 1000 for s in (2, 3, 4, 5)])
    assert table["cTMTV_mL"].tolist() == pytest.approx([(s + 1) * s * s * 8 / 1000 for s in (2, 3, 4, 5)])
    assert "TMTV agreement over 4 patients" in capsys.readouterr().out


def test_tmtv_command_with_too_few_records(tmp_path: Path, capsys: CaptureFixture):
    records = tmp_path / "records.csv"
    records.write_text("patient_id,fold,cTMTV_mL,gTMTV_mL\na,0,1.0,2.0\n")
    main(["tmtv", "--records", str(records), "--out", str(tmp_path)])
    assert capsys.readouterr().out == ""


def test_ablate_command(config_file: Path, tmp_path: Path, capsys: CaptureFixture):
    out = tmp_path / "ablation"
    main(
        [
            "ablate",
            "--config",
            str(config_file),
            "--axis",
            "msif_modules",
            "--steps",
            "1",
            "--out",
            str(out),
        ]
    )
    table = pd.read_csv(out / "ablation_msif_modules.csv")
    assert table["variant"].tolist() == ["Baseline", "MSF", "CMA", "MSF+CMA", "GFM", "Full"]
    assert "Full" in capsys.readouterr().out


@pytest.mark.parametrize(
    ["args", "code"],
    [
        (["tmtv"], 2),
        (["tmtv", "--pred-dir", "{tmp}/absent", "--gt-dir", "{tmp}/absent"], 3),
        (["tmtv", "--records", "{tmp}/absent.csv"], 3),
        (["phantom", "--config", "{config}", "--count", "0"], 2),
        (["ablate", "--config", "{config}", "--axis", "heads", "--steps", "1"], 2),
        (["train", "--config", "{config}", "--phantoms", "5", "--fold", "7"], 2),
        (["eval", "--config", "{config}", "--data", "{tmp}/absent", "--ckpt", "{tmp}/absent.pt"], 3),
    ],
)
def test_exit_codes(
    config_file: Path, tmp_path: Path, capsys: CaptureFixture, args: list[str], code: int
):
    args = [a.format(tmp=tmp_path, config=config_file) for a in args]
    assert _exit_code(args) == code
    assert capsys.readouterr().err


def test_invalid_configuration_exits_with_config_error(tmp_path: Path, capsys: CaptureFixture):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"embed_dim": 10, "num_heads": 4}}))
    assert _exit_code(["phantom", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_missing_command_is_a_usage_error():
    assert _exit_code([]) == 2
