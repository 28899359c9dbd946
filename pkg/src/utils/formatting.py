"""Report formatting for studies, benchmarks and errors."""

import csv
import io
import json
from typing import Any, Dict, List, Optional, Sequence

STUDY_COLUMNS = ["level", "dofs", "error", "eoc", "its", "tol", "time_s"]
BENCH_COLUMNS = ["threads", "dofs", "its", "time_s", "speedup", "checksum"]


class ReportFormatter:
    """Formats study reports and benchmark tables as CSV, JSON or plain tables."""

    def __init__(self, no_time: bool = False):
        """Initialize formatter.

        Args:
            no_time: Zero every time column so artifacts are reproducible
        """
        self.no_time = no_time

    def _time(self, seconds: float) -> str:
        return f"{0.0 if self.no_time else seconds:.6f}"

    def study_rows(self, report) -> List[Dict[str, str]]:
        """One row per level with the CSV column names."""
        rows = []
        for record in report.records:
            rows.append(
                {
                    "level": str(record.level),
                    "dofs": str(record.dofs),
                    "error": f"{record.error:.6e}",
                    "eoc": "" if record.eoc is None else f"{record.eoc:.4f}",
                    "its": str(record.iterations),
                    "tol": f"{record.tol_used:.6e}",
                    "time_s": self._time(record.wall_time),
                }
            )
        return rows

    def format_study_csv(self, report) -> str:
        """CSV with header level,dofs,error,eoc,its,tol,time_s."""
        return self._to_csv(STUDY_COLUMNS, self.study_rows(report))

    def format_study_json(self, report) -> str:
        """JSON mirror of the CSV with the configuration echo."""
        records = []
        for record in report.records:
            records.append(
                {
                    "level": record.level,
                    "dofs": record.dofs,
                    "free_dofs": record.free_dofs,
                    "error": record.error,
                    "eoc": record.eoc,
                    "its": record.iterations,
                    "tol": record.tol_used,
                    "time_s": 0.0 if self.no_time else record.wall_time,
                    "assembly_time_s": 0.0 if self.no_time else record.assembly_time,
                    "converged": record.converged,
                }
            )
        payload = {
            "mode": report.mode,
            "dim": report.dim,
            "eoc_convention": report.eoc_convention,
            "config": report.config,
            "records": records,
            "failed": report.failed,
        }
        if report.failure:
            payload["failure"] = report.failure
        return json.dumps(payload, indent=2)

    def format_study(self, report, format_type: str = "csv") -> str:
        if format_type == "json":
            return self.format_study_json(report)
        return self.format_study_csv(report)

    def bench_rows(self, rows: Sequence[Any]) -> List[Dict[str, str]]:
        return [
            {
                "threads": str(row.threads),
                "dofs": str(row.dofs),
                "its": str(row.iterations),
                "time_s": self._time(row.wall_time),
                "speedup": f"{1.0 if self.no_time else row.speedup:.2f}",
                "checksum": row.checksum,
            }
            for row in rows
        ]

    def format_bench_csv(self, rows: Sequence[Any]) -> str:
        """CSV with header threads,dofs,its,time_s,speedup,checksum."""
        return self._to_csv(BENCH_COLUMNS, self.bench_rows(rows))

    def format_bench_json(self, rows: Sequence[Any]) -> str:
        return json.dumps({"records": self.bench_rows(rows)}, indent=2)

    def format_table(self, rows: List[Dict[str, Any]], columns: Optional[List[str]] = None) -> str:
        """Fixed-width plain-text table for terminal output."""
        if not rows:
            return ""
        columns = columns or list(rows[0].keys())
        widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
        lines = ["  ".join(c.rjust(widths[c]) for c in columns)]
        lines.append("  ".join("-" * widths[c] for c in columns))
        for row in rows:
            lines.append("  ".join(str(row.get(c, "")).rjust(widths[c]) for c in columns))
        return "\n".join(lines)

    def format_error(self, error: Exception) -> Dict[str, Any]:
        """
        Format an error as a structured dictionary.

        Args:
            error: Exception to format

        Returns:
            Error response dictionary
        """
        if hasattr(error, "error_source") and hasattr(error, "to_dict"):
            error_dict = error.to_dict()
            response = {
                "status": "error",
                "error_type": error_dict["error_type"],
                "error": error_dict["message"],
                "error_source": error_dict["error_source"],
            }
            if error_dict.get("error_code"):
                response["error_code"] = error_dict["error_code"]
            if error_dict.get("suggested_action"):
                response["suggested_action"] = error_dict["suggested_action"]
            if error_dict.get("context"):
                response["context"] = error_dict["context"]
            return response

        return {
            "status": "error",
            "error_type": type(error).__name__,
            "error": str(error),
            "error_source": "UNKNOWN",
        }

    def _to_csv(self, columns: List[str], rows: List[Dict[str, str]]) -> str:
        output = io.StringIO()
        writer = csv.DictWriter(output, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return output.getvalue()
