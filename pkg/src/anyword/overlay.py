"""Debug overlays: tinted masks, labels, and prompt points."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from anyword.segmentor import GroundedSegmentation

PALETTE = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
)


def render_overlay(image: np.ndarray, result: GroundedSegmentation, alpha: float = 0.45, radius: int = 3) -> Image.Image:
    """Masks in palette order; filled dots are positives, rings are negatives."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    canvas = (np.clip(img[..., :3], 0, 1) * 255.0).astype(np.float64)
    for k, rec in enumerate(result.records):
        color = np.array(PALETTE[k % len(PALETTE)], dtype=np.float64)
        m = rec.mask.grid
        canvas[m] = (1 - alpha) * canvas[m] + alpha * color
    out = Image.fromarray(np.rint(canvas).astype(np.uint8), "RGB")
    draw = ImageDraw.Draw(out)
    font = ImageFont.load_default()
    for k, rec in enumerate(result.records):
        color = PALETTE[k % len(PALETTE)]
        ys, xs = np.nonzero(rec.mask.grid)
        if len(ys):
            draw.text((int(xs.min()), max(int(ys.min()) - 11, 0)), rec.label, fill=color, font=font)
        if rec.prompt is None:
            continue
        for p in rec.prompt.positives:
            draw.ellipse((p.x - radius, p.y - radius, p.x + radius, p.y + radius), fill=color, outline=(255, 255, 255))
        for p in rec.prompt.negatives:
            draw.ellipse((p.x - radius, p.y - radius, p.x + radius, p.y + radius), outline=color, width=1)
    return out


def save_overlay(path, image: np.ndarray, result: GroundedSegmentation) -> None:
    render_overlay(image, result).save(path)
