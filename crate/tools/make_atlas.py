#!/usr/bin/env python3
"""Regenerates the shipped polytonic charset and glyph atlas.

Usage: python3 tools/make_atlas.py [font.ttf]

Writes crates/core/assets/polytonic.charset, polytonic_atlas.png and
polytonic_atlas.json. Glyphs are rendered in black on white, one per
fixed-size cell, all sharing a common baseline.
"""
import json
import sys
import unicodedata as ud
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

FONT = sys.argv[1] if len(sys.argv) > 1 else "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf"
OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "assets"
SIZE = 36
CELL_W, CELL_H = 48, 64
COLUMNS = 16
PUNCT = [" ", ".", ",", "·", ";", "'", "’", "(", ")", "-", "!", ":", "«", "»"]


def charset():
    chars = list(PUNCT)
    cps = list(range(0x0386, 0x03CF)) + list(range(0x1F00, 0x2000))
    for cp in cps:
        ch = chr(cp)
        try:
            ud.name(ch)
        except ValueError:
            continue
        if ud.category(ch).startswith("L") and ud.normalize("NFC", ch) == ch:
            chars.append(ch)
    assert len(set(chars)) == len(chars)
    return chars


def main():
    chars = charset()
    font = ImageFont.truetype(FONT, SIZE)
    ascent, _ = font.getmetrics()
    baseline = 14 + ascent
    rows = (len(chars) + COLUMNS - 1) // COLUMNS
    sheet = Image.new("L", (COLUMNS * CELL_W, rows * CELL_H), 255)
    glyphs = []
    for i, ch in enumerate(chars):
        cx, cy = (i % COLUMNS) * CELL_W, (i // COLUMNS) * CELL_H
        cell = Image.new("L", (CELL_W, CELL_H), 255)
        draw = ImageDraw.Draw(cell)
        advance = int(round(font.getlength(ch)))
        draw.text((0, baseline - ascent), ch, font=font, fill=0)
        bbox = Image.eval(cell, lambda v: 255 - v).getbbox()
        width = max(advance, bbox[2] if bbox else 0)
        width = min(max(width, 1), CELL_W)
        sheet.paste(cell, (cx, cy))
        glyphs.append({"char": ch, "cell": i, "width": width})
    sheet.save(OUT / "polytonic_atlas.png", optimize=True)
    index = {
        "cell_width": CELL_W,
        "cell_height": CELL_H,
        "baseline": baseline,
        "columns": COLUMNS,
        "glyphs": glyphs,
    }
    (OUT / "polytonic_atlas.json").write_text(json.dumps(index, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    (OUT / "polytonic.charset").write_text("".join(c + "\n" for c in chars), encoding="utf-8")
    print(f"{len(chars)} characters, baseline {baseline}")


if __name__ == "__main__":
    main()
