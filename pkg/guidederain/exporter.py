"""
Result exporters.

Handles writing training logs, evaluation reports and ablation tables
as delimited text (CSV) or JSON.
"""

import csv
import io
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .models import AblationResult, EpochRecord, MetricReport


logger = logging.getLogger(__name__)


def format_value(value: Optional[float]) -> str:
    """Full-precision text for a float; infinity is written as Inf."""
    if value is None:
        return ""
    if math.isinf(value):
        return "Inf" if value > 0 else "-Inf"
    return repr(float(value))


class TrainingLogExporter:
    """
    Writes per-epoch loss records to CSV.

    The log is rewritten in full after every epoch so that an interrupted
    run still leaves a complete file.
    """

    HEADERS = [
        "epoch",
        "lr",
        "guide",
        "rain",
        "rain_free",
        "physical",
        "total",
        "batches",
    ]

    def export(self, records: Sequence[EpochRecord], output_path: str) -> None:
        """
        Export epoch records to a CSV file.

        Args:
            records: EpochRecord objects in epoch order
            output_path: Path to output CSV file

        Raises:
            IOError: If file cannot be written
        """
        output_file = Path(output_path)
        try:
            with output_file.open('w', newline='', encoding='utf-8') as csvfile:
                writer = csv.DictWriter(csvfile, fieldnames=self.HEADERS)
                writer.writeheader()
                for record in records:
                    writer.writerow(self._create_row(record))
            logger.debug(f"Wrote {len(records)} epoch rows to {output_path}")
        except IOError as e:
            logger.error(f"Failed to write training log: {e}")
            raise

    @staticmethod
    def _create_row(record: EpochRecord) -> Dict[str, Any]:
        return {
            "epoch": record.epoch,
            "lr": format_value(record.lr),
            "guide": format_value(record.guide),
            "rain": format_value(record.rain),
            "rain_free": format_value(record.rain_free),
            "physical": format_value(record.physical),
            "total": format_value(record.total),
            "batches": record.batches,
        }


class ReportCSVExporter:
    """
    Exports an evaluation report to CSV: one row per image plus a mean row.
    """

    HEADERS = ["image", "psnr", "ssim", "physical_residual"]
    MEAN_ROW = "mean"

    def render(self, report: MetricReport) -> str:
        """The CSV text, also printed by the eval command."""
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=self.HEADERS, lineterminator="\n")
        writer.writeheader()
        for row in report.rows:
            writer.writerow({
                "image": row.name,
                "psnr": format_value(row.psnr),
                "ssim": format_value(row.ssim),
                "physical_residual": format_value(row.physical_residual),
            })
        writer.writerow({
            "image": self.MEAN_ROW,
            "psnr": format_value(report.mean_psnr) if report.rows else "",
            "ssim": format_value(report.mean_ssim) if report.rows else "",
            "physical_residual": format_value(report.mean_physical_residual),
        })
        return buffer.getvalue()

    def export(self, report: MetricReport, output_path: str) -> None:
        """
        Export a MetricReport to a CSV file.

        Raises:
            IOError: If file cannot be written
        """
        logger.info(f"Exporting evaluation report to {output_path}")
        try:
            Path(output_path).write_text(self.render(report), encoding='utf-8')
            logger.info(f"Successfully exported {len(report.rows)} image rows to {output_path}")
        except IOError as e:
            logger.error(f"Failed to write CSV file: {e}")
            raise


class ReportJSONExporter:
    """
    Exports an evaluation report to JSON.

    Infinite PSNR values are written as the string "Inf" since JSON has no
    infinity literal.
    """

    @staticmethod
    def _number(value: Optional[float]):
        if value is None:
            return None
        if math.isinf(value):
            return "Inf" if value > 0 else "-Inf"
        if math.isnan(value):
            return None
        return float(value)

    def to_dict(self, report: MetricReport) -> Dict[str, Any]:
        return {
            "images": [
                {
                    "image": row.name,
                    "psnr": self._number(row.psnr),
                    "ssim": self._number(row.ssim),
                    "physical_residual": self._number(row.physical_residual),
                }
                for row in report.rows
            ],
            "mean": {
                "psnr": self._number(report.mean_psnr) if report.rows else None,
                "ssim": self._number(report.mean_ssim) if report.rows else None,
                "physical_residual": self._number(report.mean_physical_residual),
                "infinite_psnr_excluded": report.infinite_psnr,
            },
        }

    def render(self, report: MetricReport) -> str:
        return json.dumps(self.to_dict(report), indent=2) + "\n"

    def export(self, report: MetricReport, output_path: str) -> None:
        """
        Export a MetricReport to a JSON file.

        Raises:
            IOError: If file cannot be written
        """
        logger.info(f"Exporting evaluation report to {output_path}")
        try:
            Path(output_path).write_text(self.render(report), encoding='utf-8')
            logger.info(f"Successfully exported evaluation report to {output_path}")
        except IOError as e:
            logger.error(f"Failed to write JSON file: {e}")
            raise


def get_report_exporter(format_type: str):
    """
    Get appropriate report exporter based on format type.

    Args:
        format_type: One of 'csv', 'json'

    Returns:
        Exporter instance

    Raises:
        ValueError: If format_type is not supported
    """
    exporters = {
        'csv': ReportCSVExporter,
        'json': ReportJSONExporter,
    }

    if format_type not in exporters:
        raise ValueError(
            f"Unsupported format: {format_type}. "
            f"Supported formats: {', '.join(exporters.keys())}"
        )

    return exporters[format_type]()


class AblationTableExporter:
    """
    Writes the two ablation tables.

    The model table has one row per loss/architecture variant ("W" with
    multi-scale blocks, "W/O" without) and PSNR/SSIM/loss columns per
    topology M1..M4. The component table has one row per metric and a
    column per R1..R3.
    """

    MODEL_COLUMNS = ["M1", "M2", "M3", "M4"]
    COMPONENT_COLUMNS = ["R1", "R2", "R3"]
    METRICS = ["psnr", "ssim", "final_loss", "train_l1"]

    def model_rows(self, results: Sequence[AblationResult]) -> List[Dict[str, str]]:
        by_key = {(r.label, r.multiscale): r for r in results}
        rows = []
        for variant, multiscale in (("W", True), ("W/O", False)):
            row = {"variant": variant}
            for column in self.MODEL_COLUMNS:
                result = by_key.get((column, multiscale))
                for metric in self.METRICS:
                    value = getattr(result, metric) if result is not None else None
                    row[f"{column}_{metric}"] = format_value(value)
            rows.append(row)
        return rows

    def component_rows(self, results: Sequence[AblationResult]) -> List[Dict[str, str]]:
        by_label = {r.label: r for r in results if r.label in self.COMPONENT_COLUMNS}
        rows = []
        for metric in self.METRICS:
            row = {"metric": metric}
            for column in self.COMPONENT_COLUMNS:
                result = by_label.get(column)
                row[column] = format_value(getattr(result, metric) if result is not None else None)
            rows.append(row)
        return rows

    @staticmethod
    def _write(rows: List[Dict[str, str]], fieldnames: List[str], output_path: Path) -> None:
        try:
            with output_path.open('w', newline='', encoding='utf-8') as csvfile:
                writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
                writer.writeheader()
                writer.writerows(rows)
            logger.info(f"Successfully exported {len(rows)} rows to {output_path}")
        except IOError as e:
            logger.error(f"Failed to write CSV file: {e}")
            raise

    def export(
        self,
        model_results: Sequence[AblationResult],
        component_results: Sequence[AblationResult],
        output_dir: str,
    ) -> Dict[str, Path]:
        """
        Write ablation_models.csv and ablation_components.csv.

        Returns:
            Mapping of table name to written path
        """
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        model_fields = ["variant"] + [
            f"{c}_{m}" for c in self.MODEL_COLUMNS for m in self.METRICS
        ]
        paths = {
            "models": out / "ablation_models.csv",
            "components": out / "ablation_components.csv",
        }
        self._write(self.model_rows(model_results), model_fields, paths["models"])
        self._write(
            self.component_rows(component_results),
            ["metric"] + self.COMPONENT_COLUMNS,
            paths["components"],
        )
        return paths

    def render(
        self,
        model_results: Sequence[AblationResult],
        component_results: Sequence[AblationResult],
    ) -> str:
        """Plain-text versions of both tables for the terminal."""
        lines = ["Ablation on models (PSNR / SSIM)"]
        lines.append(f"{'':6}" + "".join(f"{c:>20}" for c in self.MODEL_COLUMNS))
        by_key = {(r.label, r.multiscale): r for r in model_results}
        for variant, multiscale in (("W", True), ("W/O", False)):
            cells = []
            for column in self.MODEL_COLUMNS:
                result = by_key.get((column, multiscale))
                cells.append(f"{_cell(result):>20}")
            lines.append(f"{variant:6}" + "".join(cells))
        lines.append("")
        lines.append("Ablation on components (PSNR / SSIM)")
        by_label = {r.label: r for r in component_results}
        lines.append("".join(f"{c:>20}" for c in self.COMPONENT_COLUMNS))
        lines.append("".join(f"{_cell(by_label.get(c)):>20}" for c in self.COMPONENT_COLUMNS))
        return "\n".join(lines)


def _cell(result: Optional[AblationResult]) -> str:
    if result is None:
        return "-"
    psnr = "Inf" if math.isinf(result.psnr) else f"{result.psnr:.2f}"
    return f"{psnr} / {result.ssim:.3f}"
