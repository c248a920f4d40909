"""Static HTML rendering of a score report: token heat colors and region boxes."""

from __future__ import annotations

import base64
import html
import io
from pathlib import Path

from PIL import Image

_PAGE = """<!DOCTYPE html>
<html>
<head>
<meta charset="utf-8">
<title>caption evaluation</title>
<style>
body {{ font-family: sans-serif; margin: 2em; max-width: 70em; }}
.tokens span {{ padding: 0.15em 0.3em; margin: 0 0.1em; border-radius: 3px; }}
.tokens .semantic {{ border-bottom: 2px solid #444; }}
.tokens .bad {{ color: #b00020; font-weight: bold; }}
table {{ border-collapse: collapse; margin-top: 1em; }}
td, th {{ border: 1px solid #ccc; padding: 0.3em 0.6em; text-align: right; }}
td:first-child, th:first-child {{ text-align: left; }}
.scores b {{ display: inline-block; min-width: 8em; }}
</style>
</head>
<body>
<h1>Caption evaluation</h1>
<div class="scores">
<p><b>precision</b> {precision:.4f}</p>
<p><b>recall</b> {recall:.4f}</p>
<p><b>overall</b> {overall:.4f}</p>
{plus_line}
<p><b>null score</b> {null_score:.4f}{null_note}</p>
</div>
<h2>Caption tokens</h2>
<p class="tokens">{token_spans}</p>
<h2>Image regions</h2>
<svg viewBox="0 0 {width} {height}" width="{width}" height="{height}"
     xmlns="http://www.w3.org/2000/svg">
<image href="data:image/png;base64,{image_b64}" width="{width}" height="{height}"/>
{rects}
</svg>
{region_table}
</body>
</html>
"""


def _heat(score: float, max_score: float) -> str:
    # white -> green ramp, scaled by the largest token score on the page
    t = 0.0 if max_score <= 0 else min(score / max_score, 1.0)
    r = int(255 - 130 * t)
    b = int(255 - 130 * t)
    return f"rgb({r},255,{b})"


def render_report_html(report: dict, image_path: str | Path, out_path: str | Path) -> Path:
    """Write a self-contained page for a ScoreReport JSON dictionary."""
    with Image.open(image_path) as im:
        im = im.convert("RGB")
        width, height = im.size
        buf = io.BytesIO()
        im.save(buf, format="PNG")
    image_b64 = base64.b64encode(buf.getvalue()).decode()

    alpha_t = report["alpha_t"]
    semantic = {w["idx"]: w for w in report["correct_words"]}
    max_t = max(alpha_t) if alpha_t else 1.0
    spans = []
    for i, token in enumerate(report["tokens"]):
        classes = []
        title = f"score {alpha_t[i]:.4f}"
        if i in semantic:
            classes.append("semantic")
            if not semantic[i]["ok"]:
                classes.append("bad")
                title += ", judged incorrect"
        spans.append(f'<span class="{" ".join(classes)}" title="{title}" '
                     f'style="background:{_heat(alpha_t[i], max_t)}">{html.escape(token)}</span>')

    rects, rows = [], []
    for region in report["regions"]:
        k = region["idx"]
        box = region["box"]
        mentioned = region["mentioned"]
        color = "#00a040" if mentioned else "#d03020"
        if box is not None:
            x1, y1, x2, y2 = box
            rects.append(
                f'<rect id="region-{k}" x="{x1 * width:.1f}" y="{y1 * height:.1f}" '
                f'width="{(x2 - x1) * width:.1f}" height="{(y2 - y1) * height:.1f}" '
                f'fill="none" stroke="{color}" stroke-width="2">'
                f'<title>region {k}: score {region["score"]:.4f}</title></rect>')
        rows.append(f'<tr><td>region {k}</td><td>{region["score"]:.4f}</td>'
                    f'<td>{"mentioned" if mentioned else "not mentioned"}</td></tr>')

    plus_line = ""
    if report.get("plus") is not None:
        plus_line = f'<p><b>overall+</b> {report["plus"]:.4f}</p>'
    null_note = " (caption judged irrelevant)" if report.get("null_flag") else ""
    region_table = ("<table><tr><th>region</th><th>score</th><th>decision</th></tr>"
                    + "".join(rows) + "</table>")

    page = _PAGE.format(precision=report["precision"], recall=report["recall"],
                        overall=report["overall"], plus_line=plus_line,
                        null_score=report["null_score"], null_note=null_note,
                        token_spans=" ".join(spans), width=width, height=height,
                        image_b64=image_b64, rects="\n".join(rects),
                        region_table=region_table)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(page)
    return out_path
