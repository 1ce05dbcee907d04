"""Qualitative panels and sweep plots, rendered with PIL only.

Rendering avoids plotting libraries on purpose: outputs carry no
timestamps or library metadata, so re-rendering the same inputs produces
byte-identical PNGs. Sweep plots embed their exact data points as a PNG
text chunk, making "the plot encodes these numbers" machine-checkable.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from PIL.PngImagePlugin import PngInfo

from .core import BBox, Detection, ImagePlane, PairedSample
from .classic import gray_to_3ch

GT_COLOR = (240, 220, 40)  # ground truth: solid yellow, width 2
PRED_COLOR = (60, 220, 60)  # predictions: green, width 1 plus corner marker
_LABEL_H = 14


def _plane_to_image(plane: ImagePlane, scale: int) -> Image.Image:
    u8 = plane.to_u8()
    if plane.channels == 1:
        u8 = np.repeat(u8, 3, axis=2)
    img = Image.fromarray(u8, mode="RGB")
    return img.resize((plane.width * scale, plane.height * scale), Image.NEAREST)


def _draw_gt(draw: ImageDraw.ImageDraw, boxes: Sequence[BBox], scale: int) -> None:
    for b in boxes:
        draw.rectangle(
            [b.x * scale, b.y * scale, b.x2 * scale, b.y2 * scale],
            outline=GT_COLOR,
            width=2,
        )


def _draw_preds(draw: ImageDraw.ImageDraw, dets: Sequence[Detection], scale: int) -> None:
    for d in dets:
        b = d.box
        x0, y0 = b.x * scale, b.y * scale
        draw.rectangle([x0, y0, b.x2 * scale, b.y2 * scale], outline=PRED_COLOR, width=1)
        draw.rectangle([x0, y0, x0 + 4, y0 + 4], fill=PRED_COLOR)


def render_panel(
    samples: Sequence[PairedSample],
    rows: Sequence[tuple[str, str, object, object]],
    path: str | Path,
    scale: int = 2,
) -> None:
    """Grid of tiles: one row per view, one column per sample.

    Each row is (label, kind, translator, detector) with kind "rgb_gt"
    (RGB plane, ground truth boxes) or "pred" (translated IR plane,
    detector predictions; translator None means gray replication).
    Ground truth draws yellow, predictions green with a corner marker.
    """
    if not samples or not rows:
        raise ValueError("render_panel needs at least one sample and one row")
    from .detector import decode_detections, detector_forward, nms

    h, w = samples[0].ir.height, samples[0].ir.width
    tile_w, tile_h = w * scale, h * scale
    font = ImageFont.load_default()
    canvas = Image.new(
        "RGB",
        (tile_w * len(samples), (tile_h + _LABEL_H) * len(rows)),
        (24, 24, 24),
    )
    for r, (label, kind, translator, detector) in enumerate(rows):
        y_off = r * (tile_h + _LABEL_H)
        d = ImageDraw.Draw(canvas)
        d.text((4, y_off + 2), label, fill=(230, 230, 230), font=font)
        for c, sample in enumerate(samples):
            if kind == "rgb_gt":
                tile = _plane_to_image(sample.rgb, scale)
                draw = ImageDraw.Draw(tile)
                _draw_gt(draw, sample.boxes, scale)
            elif kind == "pred":
                plane = gray_to_3ch(sample.ir) if translator is None else translator(sample.ir)
                tile = _plane_to_image(plane, scale)
                draw = ImageDraw.Draw(tile)
                outs = detector_forward(detector, plane)
                dets = nms(decode_detections(outs))
                _draw_preds(draw, [det for det in dets if det.score >= 0.5], scale)
            else:
                raise ValueError(f"unknown panel row kind {kind!r}")
            canvas.paste(tile, (c * tile_w, y_off + _LABEL_H))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")


def render_sweep_plot(
    series: dict[str, list[tuple[float, float]]],
    path: str | Path,
    x_label: str,
    y_label: str = "ap50",
    size: tuple[int, int] = (560, 360),
) -> None:
    """Line plot of (x, y) points per series; exact points embedded as the
    PNG text chunk "points" for downstream verification."""
    if not series or all(not pts for pts in series.values()):
        raise ValueError("render_sweep_plot needs at least one data point")
    w, h = size
    margin = 48
    img = Image.new("RGB", (w, h), (250, 250, 250))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()

    all_pts = [p for pts in series.values() for p in pts]
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(0.0, min(ys)), max(1.0, max(ys))
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5

    def to_px(x: float, y: float) -> tuple[float, float]:
        px = margin + (x - x_lo) / (x_hi - x_lo) * (w - 2 * margin)
        py = h - margin - (y - y_lo) / (y_hi - y_lo) * (h - 2 * margin)
        return px, py

    draw.line([margin, h - margin, w - margin, h - margin], fill=(40, 40, 40))
    draw.line([margin, margin, margin, h - margin], fill=(40, 40, 40))
    draw.text((w // 2 - 20, h - margin + 16), x_label, fill=(40, 40, 40), font=font)
    draw.text((4, margin - 24), y_label, fill=(40, 40, 40), font=font)
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        px, _ = to_px(xv, y_lo)
        _, py = to_px(x_lo, yv)
        draw.text((px - 8, h - margin + 4), f"{xv:.3g}", fill=(90, 90, 90), font=font)
        draw.text((6, py - 6), f"{yv:.2f}", fill=(90, 90, 90), font=font)

    palette = [(200, 60, 60), (60, 90, 200), (40, 150, 70), (160, 90, 180), (200, 140, 40)]
    for s_idx, (name, pts) in enumerate(sorted(series.items())):
        color = palette[s_idx % len(palette)]
        pts = sorted(pts)
        px_pts = [to_px(x, y) for x, y in pts]
        if len(px_pts) > 1:
            draw.line([c for p in px_pts for c in p], fill=color, width=2)
        for px, py in px_pts:
            draw.ellipse([px - 3, py - 3, px + 3, py + 3], fill=color)
        draw.text((w - margin - 120, margin + 14 * s_idx), name, fill=color, font=font)

    info = PngInfo()
    info.add_text(
        "points",
        json.dumps({k: sorted(v) for k, v in series.items()}, sort_keys=True),
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", pnginfo=info)


def read_plot_points(path: str | Path) -> dict[str, list[list[float]]]:
    with Image.open(path) as img:
        return json.loads(img.text["points"])
