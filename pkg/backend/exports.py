from typing import Any, Dict, List, Mapping, Optional, Sequence
import csv
import io
import json

from docx import Document
from reportlab.lib import colors
from reportlab.lib.pagesizes import letter
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
from reportlab.lib.styles import getSampleStyleSheet


Row = Mapping[str, Any]


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _columns(rows: Sequence[Row], columns: Optional[Sequence[str]]) -> List[str]:
    if columns is not None:
        return list(columns)
    seen: List[str] = []
    for row in rows:
        for key in row:
            if key not in seen:
                seen.append(key)
    return seen


class ReportExporter:
    def __init__(self):
        self.styles = getSampleStyleSheet()

    # ------------------------
    # Machine-readable: JSON / CSV
    # ------------------------
    def to_json(self, summary: Mapping[str, Any]) -> str:
        return json.dumps(dict(summary), sort_keys=True, indent=2) + "\n"

    def rows_to_csv(self, rows: Sequence[Row], columns: Optional[Sequence[str]] = None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_columns(rows, columns), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
        return buf.getvalue()

    def losses_to_csv(self, curves: Mapping[str, Sequence[float]]) -> str:
        """One row per epoch, one column per curve; shorter curves leave blanks."""
        names = sorted(curves)
        epochs = max((len(curves[n]) for n in names), default=0)
        rows = [
            {"epoch": e + 1, **{n: repr(float(curves[n][e])) if e < len(curves[n]) else "" for n in names}}
            for e in range(epochs)
        ]
        return self.rows_to_csv(rows, ["epoch", *names])

    # ------------------------
    # Documents: DOCX
    # ------------------------
    def to_docx(self, title: str, summary: Mapping[str, Any], rows: Sequence[Row] = ()) -> bytes:
        """
        Build a .docx report (bytes): summary as bold key / value lines, rows as a table.
        """
        doc = Document()
        doc.add_heading(title, 0)

        for key, value in summary.items():
            p = doc.add_paragraph()
            run = p.add_run(f"{key}: ")
            run.bold = True
            p.add_run(_fmt(value))

        if rows:
            cols = _columns(rows, None)
            table = doc.add_table(rows=1, cols=len(cols))
            for cell, name in zip(table.rows[0].cells, cols):
                cell.text = name
            for row in rows:
                cells = table.add_row().cells
                for cell, name in zip(cells, cols):
                    cell.text = _fmt(row.get(name))

        buf = io.BytesIO()
        doc.save(buf)
        buf.seek(0)
        return buf.getvalue()

    # ------------------------
    # Documents: PDF
    # ------------------------
    def to_pdf(self, title: str, summary: Mapping[str, Any], rows: Sequence[Row] = ()) -> bytes:
        """
        Build a .pdf report (bytes) using reportlab.
        """
        buf = io.BytesIO()
        doc = SimpleDocTemplate(buf, pagesize=letter)
        story: List[Any] = []

        story.append(Paragraph(title, self.styles["Title"]))
        story.append(Spacer(1, 12))

        for key, value in summary.items():
            story.append(Paragraph(f"<b>{key}:</b> {_fmt(value)}", self.styles["Normal"]))
            story.append(Spacer(1, 4))

        if rows:
            cols = _columns(rows, None)
            data = [cols] + [[_fmt(row.get(c)) for c in cols] for row in rows]
            table = Table(data, repeatRows=1)
            table.setStyle(TableStyle([
                ("FONTSIZE", (0, 0), (-1, -1), 7),
                ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
                ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
            ]))
            story.append(Spacer(1, 8))
            story.append(table)

        doc.build(story)
        buf.seek(0)
        return buf.getvalue()


def report_summary(report: Any) -> Dict[str, Any]:
    """Flat summary dict for any report object exposing to_dict()."""
    return dict(report.to_dict())
