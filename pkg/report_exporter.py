"""
Report exporter for evaluation results: text table, TSV/CSV files and an
optional Excel workbook
"""

import io
import traceback
from pathlib import Path
from typing import Optional

import pandas as pd

from evalx import BinMetrics, EvalReport
from logger import log_event
from storage import Storage

SUMMARY_FIELDS = [
    "n_psms",
    "aa_precision",
    "aa_recall",
    "pep_precision",
    "pep_recall",
    "pep_auc",
    "ptm_precision",
    "ptm_recall",
]

BIN_COLUMNS = [
    "lower",
    "upper",
    "n_psms",
    "aa_precision",
    "aa_recall",
    "pep_precision",
    "pep_recall",
    "pep_auc",
]


def fmt(value) -> str:
    """Undefined metrics render as n/a"""
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class ReportExporter:
    """Writes an EvalReport into a run directory"""

    def __init__(self, storage: Storage):
        self.storage = storage

    def summary_frame(self, report: EvalReport) -> pd.DataFrame:
        return pd.DataFrame(
            [{"metric": name, "value": getattr(report, name)} for name in SUMMARY_FIELDS]
        )

    def bins_frame(self, rows: list[BinMetrics]) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in rows], columns=BIN_COLUMNS)

    def curve_frame(self, report: EvalReport) -> pd.DataFrame:
        return pd.DataFrame(
            [point.model_dump() for point in report.curve],
            columns=["threshold", "coverage", "precision"],
        )

    def _tsv(self, frame: pd.DataFrame, sep: str = "\t") -> str:
        return frame.to_csv(sep=sep, index=False, na_rep="n/a")

    def render_text(self, report: EvalReport) -> str:
        """Fixed-width human-readable report"""
        out = io.StringIO()
        out.write("Evaluation report\n")
        out.write("=================\n")
        for name in SUMMARY_FIELDS:
            out.write(f"{name:<16}{fmt(getattr(report, name)):>10}\n")
        for title, rows in (
            ("Missing fragmentation ratio bins", report.per_bin),
            ("Imputation loss bins", report.imputation_bins),
        ):
            if not rows:
                continue
            out.write(f"\n{title}\n")
            out.write(
                f"{'bin':<18}{'n':>6}{'aa_prec':>10}{'aa_rec':>10}"
                f"{'pep_prec':>10}{'pep_rec':>10}{'pep_auc':>10}\n"
            )
            for row in rows:
                label = f"[{row.lower:.3g}, {row.upper:.3g})"
                out.write(
                    f"{label:<18}{row.n_psms:>6}{fmt(row.aa_precision):>10}{fmt(row.aa_recall):>10}"
                    f"{fmt(row.pep_precision):>10}{fmt(row.pep_recall):>10}{fmt(row.pep_auc):>10}\n"
                )
        return out.getvalue()

    def export(self, report: EvalReport, excel: bool = False) -> list[Path]:
        """
        Write report.txt, summary.tsv, per_bin.tsv, curve.csv and, when present,
        imputation_bins.tsv; report.xlsx on request

        Returns:
            list: paths written
        """
        try:
            written = [
                self.storage.write_text("report.txt", self.render_text(report)),
                self.storage.write_text("summary.tsv", self._tsv(self.summary_frame(report))),
                self.storage.write_text("per_bin.tsv", self._tsv(self.bins_frame(report.per_bin))),
                self.storage.write_text("curve.csv", self._tsv(self.curve_frame(report), sep=",")),
            ]
            if report.imputation_bins:
                written.append(
                    self.storage.write_text(
                        "imputation_bins.tsv", self._tsv(self.bins_frame(report.imputation_bins))
                    )
                )
            self.storage.write_json("report.json", report.model_dump(mode="json"))
            written.append(self.storage.path("report.json"))
            if excel:
                written.append(self.export_excel(report))
            log_event("report", "info", f"Wrote {len(written)} report files to {self.storage.root}")
            return written
        except Exception as e:
            log_event("report", "error", f"Error exporting report: {e}")
            log_event("report", "debug", f"Stack trace: {traceback.format_exc()}")
            raise

    def export_excel(self, report: EvalReport, name: Optional[str] = "report.xlsx") -> Path:
        """One sheet per table, written through openpyxl"""
        buffer = io.BytesIO()
        with pd.ExcelWriter(buffer, engine="openpyxl") as writer:
            self.summary_frame(report).to_excel(writer, sheet_name="summary", index=False)
            self.bins_frame(report.per_bin).to_excel(writer, sheet_name="per_bin", index=False)
            self.curve_frame(report).to_excel(writer, sheet_name="curve", index=False)
            if report.imputation_bins:
                self.bins_frame(report.imputation_bins).to_excel(
                    writer, sheet_name="imputation_bins", index=False
                )
        return self.storage.write_bytes(name, buffer.getvalue())
