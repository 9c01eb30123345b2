"""Regenerates the PDF fixtures. Output is byte-stable (reportlab invariant mode).

Usage: python3 make_pdfs.py
"""
import json
import os

from reportlab.lib.pagesizes import A4
from reportlab.pdfgen import canvas

HERE = os.path.dirname(os.path.abspath(__file__))


def text_pdf(path, pages, **kwargs):
    c = canvas.Canvas(path, pagesize=A4, invariant=1, **kwargs)
    for lines in pages:
        y = 800
        for line in lines:
            c.drawString(60, y, line)
            y -= 14
        c.showPage()
    c.save()


def unit_fixtures():
    out = os.path.join(HERE, "pdf")
    os.makedirs(out, exist_ok=True)
    text_pdf(
        os.path.join(out, "two_page.pdf"),
        [["SUMMARY OF PRODUCT CHARACTERISTICS", "4.8 Undesirable effects"], ["Nausea", "4.9 Overdose"]],
    )
    text_pdf(os.path.join(out, "encrypted.pdf"), [["4.8 Undesirable effects", "Secret"]], encrypt="pw")
    headings = {
        "bare": ["Undesirable effects"],
        "numbered": ["4.8 Undesirable effects"],
        "numbered_dot": ["4.8. Undesirable effects"],
        "split_line": ["4.8", "Undesirable effects"],
    }
    for name, heading in headings.items():
        text_pdf(
            os.path.join(out, f"heading_{name}.pdf"),
            [["4.7 Effects on ability to drive and use machines", "None known."]
             + heading + ["Headache", "Nausea", "4.9 Overdose", "No cases."]],
        )
    text_pdf(
        os.path.join(out, "heading_missing.pdf"),
        [["4.7 Effects on ability to drive and use machines", "None known.", "Side effects: Headache", "4.9 Overdose"]],
    )
    c = canvas.Canvas(os.path.join(out, "image_only.pdf"), pagesize=A4, invariant=1)
    c.rect(100, 100, 300, 300, fill=1)
    c.showPage()
    c.save()


def e2e_fixtures():
    spec_path = os.path.join(HERE, "e2e", "documents.json")
    if not os.path.exists(spec_path):
        return
    with open(spec_path) as f:
        docs = json.load(f)
    out = os.path.join(HERE, "e2e", "replay")
    os.makedirs(out, exist_ok=True)
    for doc in docs:
        text_pdf(os.path.join(out, doc["file"]), doc["pages"])


if __name__ == "__main__":
    unit_fixtures()
    e2e_fixtures()
