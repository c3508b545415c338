"""Overlapping fixed-size patch grids over tissue and annotated regions."""

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image

from ._validation import check_positive_int, check_unit_interval
from .errors import GeometryError
from .slide_model import SlideImage, TissueMask, compute_tissue_mask


def _as_fraction(value) -> Fraction:
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**6)
    return Fraction(value)


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 224
    overlap_fraction: Fraction = Fraction(1, 3)
    min_tissue_fraction: float = 0.5

    def __post_init__(self):
        check_positive_int(self.patch_size, "patch_size")
        try:
            overlap = _as_fraction(self.overlap_fraction)
        except (TypeError, ValueError, ZeroDivisionError):
            raise ValueError(f"overlap_fraction is not a number: {self.overlap_fraction!r}") from None
        if not 0 <= overlap < 1:
            raise ValueError(f"overlap_fraction must lie in [0, 1), got {overlap}")
        object.__setattr__(self, "overlap_fraction", overlap)
        object.__setattr__(
            self, "min_tissue_fraction", check_unit_interval(self.min_tissue_fraction, "min_tissue_fraction")
        )
        if self.stride < 1:
            raise ValueError(f"patch_size {self.patch_size} with overlap {overlap} gives stride < 1")

    @property
    def stride(self) -> int:
        # floor keeps overlap at or above the requested fraction
        return int(self.patch_size * (1 - self.overlap_fraction))


class PatchCoord(NamedTuple):
    x: int
    y: int


@dataclass(frozen=True, eq=False)
class Patch:
    coord: PatchCoord
    pixels: np.ndarray
    tissue_fraction: float

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def _axis_positions(length, size, stride):
    positions = list(range(0, length - size + 1, stride))
    if positions[-1] + size < length:
        positions.append(length - size)
    return positions


def grid_coords(width, height, spec: PatchSpec = PatchSpec()) -> list:
    """Row-major top-left corners of the sliding window.

    A final clamped position is appended on each axis when the regular
    stride would leave a right or bottom margin uncovered.
    """
    size = spec.patch_size
    if width < size or height < size:
        raise GeometryError(f"{width}x{height} image is smaller than patch size {size}")
    xs = _axis_positions(width, size, spec.stride)
    ys = _axis_positions(height, size, spec.stride)
    return [PatchCoord(x, y) for y in ys for x in xs]


def _integral(mask):
    out = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1, out=out[1:, 1:])
    return out


def _box_sum(integral, x, y, size):
    return int(
        integral[y + size, x + size] - integral[y, x + size] - integral[y + size, x] + integral[y, x]
    )


def extract_patches(slide: SlideImage, mask: TissueMask, spec: PatchSpec = PatchSpec()) -> list:
    """Patches whose tissue fraction reaches ``spec.min_tissue_fraction``."""
    if (mask.width, mask.height) != (slide.width, slide.height):
        raise GeometryError(
            f"mask {mask.width}x{mask.height} does not match slide {slide.width}x{slide.height}"
        )
    size = spec.patch_size
    area = size * size
    integral = _integral(mask.bits)
    patches = []
    for coord in grid_coords(slide.width, slide.height, spec):
        frac = _box_sum(integral, coord.x, coord.y, size) / area
        if frac >= spec.min_tissue_fraction:
            pixels = slide.pixels[coord.y : coord.y + size, coord.x : coord.x + size]
            patches.append(Patch(coord, pixels, frac))
    return patches


class RoiPatches(NamedTuple):
    patches: list  # of (Patch, ClassLabel)
    skipped: int


def extract_roi_patches(slide: SlideImage, annotations, spec: PatchSpec = PatchSpec(), mask=None) -> RoiPatches:
    """Run the sliding window inside each annotated box.

    Grids use the box's own origin. Regions smaller than the patch in either
    dimension contribute nothing and are counted in ``skipped``. No tissue
    admission is applied; ``tissue_fraction`` is informational.
    """
    if mask is None:
        mask = compute_tissue_mask(slide)
    integral = _integral(mask.bits)
    size = spec.patch_size
    out, skipped = [], 0
    for region in annotations:
        x0, y0, x1, y1 = region.bbox
        if x1 - x0 < size or y1 - y0 < size:
            skipped += 1
            continue
        for local in grid_coords(x1 - x0, y1 - y0, spec):
            x, y = x0 + local.x, y0 + local.y
            frac = _box_sum(integral, x, y, size) / (size * size)
            patch = Patch(PatchCoord(x, y), slide.pixels[y : y + size, x : x + size], frac)
            out.append((patch, region.label))
    return RoiPatches(out, skipped)


def export_patches(slide_id, patches, out_dir, labels=None) -> list:
    """Write ``<slide_id>_<x>_<y>.png`` files and return their index records.

    ``labels`` optionally gives one ClassLabel per patch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, patch in enumerate(patches):
        x, y = patch.coord
        Image.fromarray(np.ascontiguousarray(patch.pixels), "RGB").save(out_dir / f"{slide_id}_{x}_{y}.png")
        rec = {"slide_id": slide_id, "x": x, "y": y, "tissue_fraction": patch.tissue_fraction}
        if labels is not None:
            rec["label"] = labels[i].key
        records.append(rec)
    return records


def write_index(records, path, append=False):
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
