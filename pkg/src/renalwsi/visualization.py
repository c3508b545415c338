"""Color-coded class overlays of patch predictions on a slide."""

import io
import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from ._validation import check_positive_int, check_unit_interval
from .labels import CLASSES, DISPLAY_NAMES, ClassLabel

DEFAULT_COLORS = {
    ClassLabel.NORMAL: (46, 160, 67),
    ClassLabel.ONCOCYTOMA: (255, 159, 28),
    ClassLabel.CHROMOPHOBE_RCC: (148, 52, 230),
    ClassLabel.CLEAR_CELL_RCC: (230, 25, 45),
    ClassLabel.PAPILLARY_RCC: (30, 110, 240),
}


@dataclass(frozen=True)
class Palette:
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    alpha: float = 0.4
    hide_normal: bool = False

    def __post_init__(self):
        colors = {ClassLabel.parse(k): tuple(int(v) for v in rgb) for k, rgb in self.colors.items()}
        if set(colors) != set(CLASSES):
            raise ValueError("palette must define a color for each of the five classes")
        if any(len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb) for rgb in colors.values()):
            raise ValueError("palette colors must be RGB triples in [0, 255]")
        if len(set(colors.values())) != len(CLASSES):
            raise ValueError("palette colors must be distinct")
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "alpha", check_unit_interval(self.alpha, "alpha"))

    @classmethod
    def from_json(cls, data):
        return cls(
            colors=data.get("colors", DEFAULT_COLORS),
            alpha=data.get("alpha", 0.4),
            hide_normal=bool(data.get("hide_normal", False)),
        )

    def to_json(self) -> dict:
        return {
            "colors": {c.key: list(rgb) for c, rgb in self.colors.items()},
            "alpha": self.alpha,
            "hide_normal": self.hide_normal,
        }


def downsample(pixels, factor) -> np.ndarray:
    """Box-average by ``factor``; edge blocks average only the pixels they hold."""
    factor = check_positive_int(factor, "downsample")
    pixels = np.asarray(pixels)
    if factor == 1:
        return pixels.copy()
    h, w = pixels.shape[:2]
    oh, ow = -(-h // factor), -(-w // factor)
    padded = np.zeros((oh * factor, ow * factor, 3), dtype=np.int64)
    padded[:h, :w] = pixels
    weight = np.zeros((oh * factor, ow * factor), dtype=np.int64)
    weight[:h, :w] = 1
    sums = padded.reshape(oh, factor, ow, factor, 3).sum(axis=(1, 3))
    counts = weight.reshape(oh, factor, ow, factor).sum(axis=(1, 3))[..., None]
    return ((sums + counts // 2) // counts).astype(np.uint8)


def class_index_map(shape, predictions, patch_size, factor=1) -> np.ndarray:
    """Per output pixel, the canonical index of the winning class or -1.

    Where footprints overlap, the most confident prediction wins; equal
    confidences go to the lower canonical class index.
    """
    oh, ow = shape
    out = np.full((oh, ow), -1, dtype=np.int8)
    # paint in ascending priority so the winner is painted last
    ordered = sorted(predictions, key=lambda p: (p.confidence, -int(p.label)))
    for p in ordered:
        x, y = p.coord
        x0, y0 = x // factor, y // factor
        x1, y1 = -(-(x + patch_size) // factor), -(-(y + patch_size) // factor)
        out[y0:y1, x0:x1] = int(p.label)
    return out


def render_overlay(slide, predictions, palette=Palette(), downsample_factor=1, patch_size=224) -> np.ndarray:
    """Alpha-blend class colors over the (downsampled) slide.

    Output pixels covered by no prediction are left exactly as the
    downsampled slide.
    """
    predictions = list(predictions)
    for p in predictions:
        x, y = p.coord
        if x < 0 or y < 0 or x + patch_size > slide.width or y + patch_size > slide.height:
            raise ValueError(
                f"prediction at ({x}, {y}) with size {patch_size} lies outside the "
                f"{slide.width}x{slide.height} slide"
            )
    if palette.hide_normal:
        predictions = [p for p in predictions if p.label is not ClassLabel.NORMAL]

    base = downsample(slide.pixels, downsample_factor)
    labels = class_index_map(base.shape[:2], predictions, patch_size, downsample_factor)
    lut = np.array([palette.colors[c] for c in CLASSES], dtype=np.float64)
    covered = labels >= 0
    out = base.copy()
    blended = (1.0 - palette.alpha) * base[covered] + palette.alpha * lut[labels[covered]]
    out[covered] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out


def render_legend(palette=Palette(), swatch=16, width=220) -> np.ndarray:
    """Vertical strip of color swatches with class names."""
    font = ImageFont.load_default()
    pad = 4
    row = swatch + pad
    im = Image.new("RGB", (width, row * len(CLASSES) + pad), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    for i, c in enumerate(CLASSES):
        top = pad + i * row
        draw.rectangle([pad, top, pad + swatch - 1, top + swatch - 1], fill=palette.colors[c], outline=(0, 0, 0))
        draw.text((2 * pad + swatch, top + 2), DISPLAY_NAMES[c], fill=(0, 0, 0), font=font)
    return np.asarray(im)


def png_bytes(image) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), "RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_png(image, path):
    with open(path, "wb") as fh:
        fh.write(png_bytes(image))


def load_palette(path) -> Palette:
    with open(path) as fh:
        return Palette.from_json(json.load(fh))
