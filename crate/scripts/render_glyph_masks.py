"""Rasterise the glyph masks used by the shipped benchmark suite.

The suite's original typefaces are not redistributable, so each font type is
rendered with a DejaVu stand-in. Output: <out>/<font_type>/<codepoint-hex>.png,
64x64, glyph 255 on background 0. Characters the stand-in cannot draw are skipped.
"""

import json
import sys
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

SIZE = 64
BOX = 52
DEJAVU = Path("/usr/share/fonts/truetype/dejavu")
STAND_INS = {
    "COOPBL": ("DejaVuSerif-Bold.ttf", 1),
    "SANVITO": ("DejaVuSerif.ttf", 2),
    "POSTINO": ("DejaVuSansMono-Bold.ttf", 1),
    "HOBO": ("DejaVuSans-Bold.ttf", 2),
    "POPLAR": ("DejaVuSansMono.ttf", 2),
}


def render(font_path, stroke, ch):
    font = ImageFont.truetype(str(font_path), 200)
    if font.getmask(ch).getbbox() is None:
        return None
    big = Image.new("L", (400, 400), 0)
    ImageDraw.Draw(big).text((100, 50), ch, font=font, fill=255)
    bbox = big.getbbox()
    if bbox is None:
        return None
    glyph = big.crop(bbox)
    scale = BOX / max(glyph.size)
    w, h = max(1, round(glyph.width * scale)), max(1, round(glyph.height * scale))
    glyph = glyph.resize((w, h), Image.LANCZOS)
    canvas = Image.new("L", (SIZE, SIZE), 0)
    canvas.paste(glyph, ((SIZE - w) // 2, (SIZE - h) // 2))
    if stroke:
        from PIL import ImageFilter

        canvas = canvas.filter(ImageFilter.MaxFilter(2 * stroke + 1))
    return canvas.point(lambda v: 255 if v >= 128 else 0).convert("L")


def main(suite, out):
    cases = json.loads(Path(suite).read_text(encoding="utf-8"))
    wanted = {}
    for case in cases:
        if case["font_type"] in STAND_INS:
            wanted.setdefault(case["font_type"], set()).update(case["characters"])
    for font_type, chars in sorted(wanted.items()):
        file, stroke = STAND_INS[font_type]
        d = Path(out) / font_type
        d.mkdir(parents=True, exist_ok=True)
        for ch in sorted(chars):
            img = render(DEJAVU / file, stroke, ch)
            if img is not None:
                img.save(d / f"{ord(ch):04x}.png", optimize=True)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
