"""Total metabolic tumor volume and agreement between predicted and reference volumes."""

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from scipy import stats

from fuseg3d import PatientID
from fuseg3d.core import Volume3D
from fuseg3d.errors import DataError, MetricError, StatisticsError
from fuseg3d.io import read_json, write_json

logger = logging.getLogger(__name__)

LOA_FACTOR = 1.96
RECORD_COLUMNS = ["patient_id", "fold", "cTMTV_mL", "gTMTV_mL"]


def tmtv(mask: Volume3D) -> float:
    """Positive voxel count times voxel volume, in mL."""
    if not np.isin(mask.data, (0, 1)).all():
        raise MetricError(f"TMTV needs a binary mask, {mask.patient_id!r} is not")
    return int(np.count_nonzero(mask.data)) * mask.voxel_volume_mm3 / 1000.0


@dataclass(frozen=True)
class TMTVRecord:
    patient_id: PatientID
    ctmtv: float
    gtmtv: float
    fold: int = 0

    def __post_init__(self) -> None:
        if self.ctmtv < 0 or self.gtmtv < 0:
            raise DataError(f"Negative TMTV for {self.patient_id!r}: c={self.ctmtv}, g={self.gtmtv}")


@dataclass(frozen=True)
class AgreementReport:
    """Regression, correlation and Bland-Altman summary of cTMTV against gTMTV.

    The regression has cTMTV as response and gTMTV as predictor. Differences are
    `cTMTV - gTMTV`; their standard deviation uses the sample (n - 1) convention.
    """

    n: int
    slope: float
    intercept: float
    r_squared: float
    pearson_r: float
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    mean_c: float
    sd_c: float
    mean_g: float
    sd_g: float

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, mapping: dict[str, Any]) -> "AgreementReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in names})


def fit_agreement(records: list[TMTVRecord]) -> AgreementReport:
    """Agreement statistics of at least three records.

    Raises:
        StatisticsError: Fewer than three records, or either volume series is constant.
    """
    if len(records) < 3:
        raise StatisticsError(f"Agreement needs at least 3 records, got {len(records)}")

    c = np.array([r.ctmtv for r in records], dtype=np.float64)
    g = np.array([r.gtmtv for r in records], dtype=np.float64)
    if np.ptp(g) == 0:
        raise StatisticsError("gTMTV variance is zero; regression is undefined")
    if np.ptp(c) == 0:
        raise StatisticsError("cTMTV variance is zero; correlation is undefined")

    fit = stats.linregress(g, c)
    pearson_r = float(np.clip(stats.pearsonr(g, c)[0], -1.0, 1.0))
    diff = c - g
    mean_diff = float(diff.mean())
    sd_diff = float(diff.std(ddof=1))

    report = AgreementReport(
        n=len(records),
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=float(np.clip(fit.rvalue**2, 0.0, 1.0)),
        pearson_r=pearson_r,
        mean_diff=mean_diff,
        sd_diff=sd_diff,
        loa_low=mean_diff - LOA_FACTOR * sd_diff,
        loa_high=mean_diff + LOA_FACTOR * sd_diff,
        mean_c=float(c.mean()),
        sd_c=float(c.std(ddof=1)),
        mean_g=float(g.mean()),
        sd_g=float(g.std(ddof=1)),
    )
    logger.info(
        f"Agreement over {report.n} records: slope {report.slope:.4f}, R² {report.r_squared:.4f}, "
        f"r {report.pearson_r:.4f}, bias {report.mean_diff:.3f} mL "
        f"[{report.loa_low:.3f}, {report.loa_high:.3f}]"
    )
    return report


def fit_agreement_by_fold(records: list[TMTVRecord]) -> dict[str, AgreementReport]:
    """One report per fold (`fold0`, `fold1`, ...) plus `pooled` over all records.

    Folds too small or too uniform for statistics are skipped with a warning.
    """
    reports = {}
    for fold in sorted({r.fold for r in records}):
        subset = [r for r in records if r.fold == fold]
        try:
            reports[f"fold{fold}"] = fit_agreement(subset)
        except StatisticsError as e:
            logger.warning(f"Skipping agreement for fold {fold}: {e}")
    reports["pooled"] = fit_agreement(records)
    return reports


def _regression_figure(report: AgreementReport, c: np.ndarray, g: np.ndarray) -> Figure:
    fig = Figure(figsize=(5, 5))
    ax = fig.add_subplot()
    ax.scatter(g, c, s=12, alpha=0.7, label="patients")
    span = np.linspace(0.0, max(g.max(), c.max(), 1e-9), 50)
    ax.plot(span, report.slope * span + report.intercept, color="C1",
            label=f"fit: y = {report.slope:.3f}x + {report.intercept:.2f}, R² = {report.r_squared:.3f}")
    ax.plot(span, span, color="grey", linestyle="--", linewidth=0.8, label="y = x")
    ax.set_xlabel("gTMTV (mL)")
    ax.set_ylabel("cTMTV (mL)")
    ax.set_title(f"Linear regression, r = {report.pearson_r:.3f}")
    ax.legend(loc="upper left", fontsize="small")
    return fig


def _bland_altman_figure(report: AgreementReport, c: np.ndarray, g: np.ndarray) -> Figure:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    ax.scatter((c + g) / 2, c - g, s=12, alpha=0.7)
    ax.axhline(report.mean_diff, color="C1", label=f"mean {report.mean_diff:.2f} mL")
    for value in (report.loa_low, report.loa_high):
        ax.axhline(value, color="C3", linestyle="--", label=f"{value:.2f} mL")
    ax.set_xlabel("Mean of cTMTV and gTMTV (mL)")
    ax.set_ylabel("cTMTV - gTMTV (mL)")
    ax.set_title(f"Bland-Altman, mean ± {LOA_FACTOR} SD")
    ax.legend(loc="best", fontsize="small")
    return fig


def emit_agreement_plots(
    report: AgreementReport, records: list[TMTVRecord], out_dir: Path, prefix: str = "pooled"
) -> list[Path]:
    """Writes `<prefix>_regression.png`, `<prefix>_bland_altman.png` and
    `<prefix>_agreement.json` to `out_dir`.

    Returns:
        The written paths.

    Raises:
        OSError: `out_dir` cannot be created or written to.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    c = np.array([r.ctmtv for r in records], dtype=np.float64)
    g = np.array([r.gtmtv for r in records], dtype=np.float64)

    written = []
    for name, figure in (
        ("regression", _regression_figure(report, c, g)),
        ("bland_altman", _bland_altman_figure(report, c, g)),
    ):
        path = out_dir / f"{prefix}_{name}.png"
        figure.savefig(path, dpi=100, bbox_inches="tight")
        written.append(path)

    json_path = out_dir / f"{prefix}_agreement.json"
    write_json(report.to_json(), json_path)
    written.append(json_path)
    logger.info(f"Wrote agreement plots and statistics for {prefix} to {out_dir}")
    return written


def read_agreement_json(path: Path) -> AgreementReport:
    return AgreementReport.from_json(read_json(path))


def emit_fold_reports(records: list[TMTVRecord], out_dir: Path) -> dict[str, AgreementReport]:
    """Fits and plots every fold and the pooled cohort."""
    reports = fit_agreement_by_fold(records)
    for prefix, report in reports.items():
        subset = records if prefix == "pooled" else [r for r in records if f"fold{r.fold}" == prefix]
        emit_agreement_plots(report, subset, out_dir, prefix=prefix)
    return reports


def records_table(records: list[TMTVRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.patient_id, r.fold, r.ctmtv, r.gtmtv) for r in records], columns=RECORD_COLUMNS
    )


def write_records_csv(records: list[TMTVRecord], path: Path) -> None:
    records_table(records).to_csv(path, index=False)
    logger.info(f"Wrote {len(records)} TMTV records to {path}")


def read_records_csv(path: Path) -> list[TMTVRecord]:
    if not path.exists():
        raise FileNotFoundError(f"No TMTV records at {path}")
    table = pd.read_csv(path, dtype={"patient_id": str})
    missing = set(RECORD_COLUMNS) - set(table.columns)
    if missing:
        raise DataError(f"{path} lacks columns {sorted(missing)}")
    return [
        TMTVRecord(
            patient_id=str(row.patient_id),
            ctmtv=float(row.cTMTV_mL),
            gtmtv=float(row.gTMTV_mL),
            fold=int(row.fold),
        )
        for row in table.itertuples(index=False)
    ]
