"""PDF report of a convergence study."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Mapping

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import mm
from reportlab.pdfgen import canvas
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from .experiments import CSV_COLUMNS, RATE_COLUMNS, RateTable

logger = logging.getLogger(__name__)

COLUMN_LABELS = {
    "k": "k",
    "tau": "tau",
    "h": "h",
    "state_l2": "Estado L2",
    "control_l1": "Controle L1",
    "jump_pos_max": "Posição",
    "jump_amp_max": "Amplitude",
    "offset_err": "Média",
    "cost_err": "Custo",
    "tv_err": "TV",
    "pdap_iters": "Iter.",
    "converged": "Conv.",
}


def build_convergence_report(table: RateTable, parameters: Mapping[str, object], output_path: Path) -> Path:
    logger.info("Gerando relatório PDF em %s", output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    doc = SimpleDocTemplate(
        str(output_path),
        pagesize=A4,
        leftMargin=15 * mm,
        rightMargin=15 * mm,
        topMargin=20 * mm,
        bottomMargin=20 * mm,
        title="Estudo de convergência",
        invariant=1,
    )
    styles = _create_styles()
    story: list = [Paragraph("Estudo de convergência", styles["ReportTitle"]), Spacer(1, 12)]

    story.append(Paragraph("Parâmetros", styles["SectionTitle"]))
    for key, value in parameters.items():
        story.append(Paragraph(f"<b>{key}</b>: {value}", styles["ReportBody"]))
    story.append(Spacer(1, 10))

    story.append(Paragraph("Erros por nível", styles["SectionTitle"]))
    story.append(_errors_table(table))
    story.append(Spacer(1, 10))

    story.append(Paragraph("Taxas ajustadas (log2)", styles["SectionTitle"]))
    story.append(_rates_table(table))
    story.append(Spacer(1, 10))

    reference = "indisponível" if math.isnan(table.reference_error) else f"{table.reference_error:.3e}"
    story.append(Paragraph(f"Erro estimado da referência (Richardson): {reference}", styles["ReportBody"]))
    verdict = "aceito" if table.accepted() else "não aceito"
    story.append(Paragraph(f"Critério de aceitação: <b>{verdict}</b>", styles["ReportBody"]))
    doc.build(story, canvasmaker=NumberedCanvas)
    return output_path


def _format_cell(value: object) -> str:
    if isinstance(value, bool):
        return "sim" if value else "não"
    if isinstance(value, float):
        return "-" if math.isnan(value) else f"{value:.3e}"
    return str(value)


def _errors_table(table: RateTable) -> Table:
    header = [COLUMN_LABELS[column] for column in CSV_COLUMNS]
    body = [[_format_cell(row.to_row()[column]) for column in CSV_COLUMNS] for row in table.rows]
    grid = Table([header, *body], repeatRows=1)
    grid.setStyle(_table_style())
    return grid


def _rates_table(table: RateTable) -> Table:
    rates = table.rates()
    levels = [row.k for row in table.rows]
    header = ["Quantidade", *[f"{a}-{b}" for a, b in zip(levels, levels[1:])]]
    body = [[COLUMN_LABELS[column], *[_format_cell(r) for r in rates[column]]] for column in RATE_COLUMNS]
    grid = Table([header, *body], repeatRows=1)
    grid.setStyle(_table_style())
    return grid


def _table_style() -> TableStyle:
    return TableStyle(
        [
            ("FONTNAME", (0, 0), (-1, -1), "Helvetica"),
            ("FONTSIZE", (0, 0), (-1, -1), 7),
            ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#D6EAF8")),
            ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
            ("ALIGN", (1, 1), (-1, -1), "RIGHT"),
        ]
    )


def _create_styles() -> dict[str, ParagraphStyle]:
    styles = getSampleStyleSheet()
    styles.add(
        ParagraphStyle(
            name="ReportTitle",
            parent=styles["Title"],
            fontSize=20,
            leading=24,
            alignment=1,
            textColor=colors.HexColor("#154360"),
        )
    )
    styles.add(
        ParagraphStyle(
            name="SectionTitle",
            parent=styles["Heading2"],
            fontSize=13,
            leading=16,
            spaceAfter=6,
            textColor=colors.HexColor("#1A5276"),
        )
    )
    styles.add(ParagraphStyle(name="ReportBody", parent=styles["BodyText"], fontSize=10, leading=13))
    return styles


class NumberedCanvas(canvas.Canvas):
    """Canvas that writes "Página n de N" once the page count is known."""

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self._saved_page_states: list[dict] = []

    def showPage(self) -> None:  # pragma: no cover - reportlab handles runtime
        self._saved_page_states.append(dict(self.__dict__))
        self._startPage()

    def save(self) -> None:  # pragma: no cover - reportlab handles runtime
        total_pages = len(self._saved_page_states)
        for state in self._saved_page_states:
            self.__dict__.update(state)
            self._draw_page_number(total_pages)
            super().showPage()
        super().save()

    def _draw_page_number(self, page_count: int) -> None:
        self.setFont("Helvetica", 8)
        self.drawRightString(195 * mm, 10 * mm, f"Página {self._pageNumber} de {page_count}")


__all__ = ["NumberedCanvas", "build_convergence_report"]
