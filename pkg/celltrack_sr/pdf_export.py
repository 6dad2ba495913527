from __future__ import annotations

import os
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

from fpdf import FPDF
from fpdf.errors import FPDFException

from .db import SUMMARY_COLUMNS
from .exporters import SUMMARY_LABELS

# Fixed so that repeated runs produce identical bytes
REPORT_CREATION_DATE = datetime(2020, 1, 1, tzinfo=timezone.utc)

SYSTEM_FONTS: Tuple[Tuple[str, Optional[str]], ...] = (
    ("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf", "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf"),
    ("/usr/share/fonts/truetype/freefont/FreeSans.ttf", "/usr/share/fonts/truetype/freefont/FreeSansBold.ttf"),
)


def _font_candidates() -> List[Tuple[str, Optional[str]]]:
    custom = os.environ.get("PDF_FONT_REGULAR")
    found = [(custom, os.environ.get("PDF_FONT_BOLD"))] if custom else []
    return found + list(SYSTEM_FONTS)


def _register_unicode_font(pdf: FPDF) -> Optional[str]:
    """Register the first usable TTF pair as "SummaryFont"; None means core fonts only."""
    for regular, bold in _font_candidates():
        if not os.path.exists(regular):
            continue
        try:
            pdf.add_font("SummaryFont", "", regular)
            pdf.add_font("SummaryFont", "B", bold if bold and os.path.exists(bold) else regular)
        except (FPDFException, OSError, RuntimeError, ValueError):
            continue
        return "SummaryFont"
    return None


def generate_summary_pdf(
    table: Sequence[Dict[str, Any]],
    out_path: str,
    title: str = "Super-resolution comparison",
    info: Sequence[Tuple[str, str]] = (),
) -> str:
    """Landscape A4 table: one row per source, mean ± std per metric."""
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)

    pdf = FPDF(orientation="L", unit="mm", format="A4")
    pdf.set_creation_date(REPORT_CREATION_DATE)
    pdf.set_auto_page_break(auto=True, margin=12)
    pdf.add_page()
    unicode_font = _register_unicode_font(pdf)
    family = unicode_font or "Helvetica"

    def safe(text: str) -> str:
        if unicode_font:
            return text
        return text.replace("±", "+/-").replace("—", "-").replace("–", "-")

    pdf.set_font(family, "B", 16)
    pdf.cell(0, 10, safe(title), ln=1)
    pdf.set_font(family, size=11)
    pdf.ln(2)
    for k, v in info:
        pdf.cell(60, 7, safe(k))
        pdf.cell(0, 7, safe(v), ln=1)
    pdf.ln(3)

    headers = ["Source", "Videos"] + [SUMMARY_LABELS[c] for c in SUMMARY_COLUMNS]
    col_widths = [30, 16] + [27] * len(SUMMARY_COLUMNS)

    def draw_header():
        pdf.set_font(family, "B", 9)
        pdf.set_fill_color(230, 230, 230)
        for h, w in zip(headers, col_widths):
            pdf.cell(w, 8, safe(h), border=1, fill=True)
        pdf.ln(8)
        pdf.set_font(family, size=9)

    draw_header()
    fill_toggle = False
    for entry in table:
        if pdf.will_page_break(7):
            pdf.add_page()
            draw_header()
        pdf.set_fill_color(*((246, 246, 246) if fill_toggle else (255, 255, 255)))
        fill_toggle = not fill_toggle
        cells = [entry["source"], str(entry["videos"])] + [entry[c + "_text"] for c in SUMMARY_COLUMNS]
        for idx, (val, w) in enumerate(zip(cells, col_widths)):
            pdf.cell(w, 7, safe(str(val)), border=1, fill=True, align="L" if idx == 0 else "R")
        pdf.ln(7)

    pdf.output(out_path)
    return out_path
