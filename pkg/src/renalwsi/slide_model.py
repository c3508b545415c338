"""Slides, region annotations, tissue masks and dataset manifests."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import AnnotationError, SlideFormatError, SlideIOError
from .labels import ClassLabel

logger = logging.getLogger(__name__)

DEFAULT_MPP = 0.50
DEFAULT_WHITENESS_CUTOFF = 220
SUPPORTED_FORMATS = ("PNG", "TIFF")
SPLITS = ("train", "dev", "test")


def _readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SlideImage:
    """An RGB raster with physical pixel spacing.

    ``pixels`` is a read-only ``(height, width, 3)`` uint8 array.
    ``mpp_defaulted`` is set when no sidecar metadata supplied the spacing.
    """

    id: str
    pixels: np.ndarray
    microns_per_pixel: float = DEFAULT_MPP
    mpp_defaulted: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"slide pixels must be (H, W, 3) uint8, got {px.shape} {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("slide must be at least 1x1")
        if not self.microns_per_pixel > 0:
            raise ValueError(f"microns_per_pixel must be > 0, got {self.microns_per_pixel}")
        object.__setattr__(self, "pixels", _readonly(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RegionAnnotation:
    """Labeled bounding box ``(x0, y0, x1, y1)``, half-open, in pixels."""

    label: ClassLabel
    bbox: tuple

    def __post_init__(self):
        object.__setattr__(self, "label", ClassLabel.parse(self.label))
        bbox = tuple(int(v) for v in self.bbox)
        if len(bbox) != 4:
            raise AnnotationError(f"bbox must have 4 coordinates, got {self.bbox!r}")
        object.__setattr__(self, "bbox", bbox)

    def to_json(self) -> dict:
        return {"label": self.label.key, "bbox": list(self.bbox)}


@dataclass(frozen=True, eq=False)
class TissueMask:
    """Boolean per-pixel map, True where the slide shows tissue."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValueError("tissue mask must be 2-D")
        object.__setattr__(self, "bits", _readonly(bits))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def tissue_pixels(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class SlideRecord:
    """One manifest entry. Paths are resolved against the manifest directory."""

    id: str
    image: str
    gold_label: ClassLabel
    split: str = "test"
    annotations: str = None
    root: Path = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "gold_label", ClassLabel.parse(self.gold_label))
        if self.split not in SPLITS:
            raise AnnotationError(f"slide {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")

    def resolve(self, rel):
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    @property
    def image_path(self) -> Path:
        return self.resolve(self.image)

    @property
    def annotations_path(self):
        return self.resolve(self.annotations)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "image": self.image,
            "annotations": self.annotations,
            "gold_label": self.gold_label.key,
            "split": self.split,
        }


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def load_slide(path, slide_id=None) -> SlideImage:
    """Decode a PNG or TIFF slide, reading ``<slide>.meta.json`` if present.

    Raises SlideIOError for unreadable/truncated files and SlideFormatError
    for other formats or non-8-bit pixel modes.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in SUPPORTED_FORMATS:
                raise SlideFormatError(f"{path}: unsupported format {fmt}")
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise SlideFormatError(f"{path}: unsupported pixel mode {im.mode}")
            im.load()
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise SlideFormatError(f"{path}: not a supported raster ({exc})") from exc
    except SlideFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise SlideIOError(f"{path}: cannot read slide ({exc})") from exc

    mpp, defaulted = DEFAULT_MPP, True
    meta = _sidecar_path(path)
    if meta.exists():
        try:
            mpp = float(json.loads(meta.read_text())["microns_per_pixel"])
            defaulted = False
        except (ValueError, KeyError, TypeError) as exc:
            raise SlideIOError(f"{meta}: invalid sidecar metadata ({exc})") from exc
    else:
        logger.warning("%s: no sidecar metadata, assuming %.2f um/px", path, DEFAULT_MPP)
    return SlideImage(slide_id or path.stem, pixels, mpp, defaulted)


def save_slide(slide: SlideImage, path, write_meta=True):
    path = Path(path)
    Image.fromarray(slide.pixels, "RGB").save(path, format="PNG")
    if write_meta:
        _sidecar_path(path).write_text(json.dumps({"microns_per_pixel": slide.microns_per_pixel}))


def compute_tissue_mask(slide: SlideImage, whiteness_cutoff=DEFAULT_WHITENESS_CUTOFF) -> TissueMask:
    """Background is any pixel whose darkest channel is >= ``whiteness_cutoff``."""
    if isinstance(whiteness_cutoff, bool) or not 0 <= int(whiteness_cutoff) <= 255:
        raise ValueError(f"whiteness_cutoff must be an integer in [0, 255], got {whiteness_cutoff}")
    return TissueMask(slide.pixels.min(axis=2) < int(whiteness_cutoff))


def validate_annotation(region: RegionAnnotation, width, height, index=None):
    x0, y0, x1, y1 = region.bbox
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        where = f"region {index}" if index is not None else "region"
        raise AnnotationError(
            f"{where} ({region.label.key}) bbox {list(region.bbox)} is outside the "
            f"{width}x{height} slide or empty"
        )


def parse_annotations(data, width, height) -> list:
    if not isinstance(data, list):
        raise AnnotationError("annotation file must contain a JSON array")
    regions = []
    for i, item in enumerate(data):
        try:
            region = RegionAnnotation(ClassLabel.parse(item["label"]), tuple(item["bbox"]))
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"region {i}: malformed entry {item!r}") from exc
        except ValueError as exc:
            raise AnnotationError(f"region {i}: {exc}") from exc
        validate_annotation(region, width, height, i)
        regions.append(region)
    return regions


def load_annotations(path, slide: SlideImage) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_annotations(data, slide.width, slide.height)


def save_annotations(regions, path):
    Path(path).write_text(json.dumps([r.to_json() for r in regions], indent=1))


def load_manifest(path) -> list:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, list):
        raise AnnotationError(f"{path}: manifest must be a JSON array")
    records, seen = [], set()
    for i, item in enumerate(data):
        try:
            rec = SlideRecord(
                id=str(item["id"]),
                image=item["image"],
                gold_label=item["gold_label"],
                split=item.get("split", "test"),
                annotations=item.get("annotations"),
                root=path.parent,
            )
        except (KeyError, TypeError) as exc:
            raise AnnotationError(f"{path}: entry {i} is missing field {exc}") from exc
        except ValueError as exc:
            raise AnnotationError(f"{path}: entry {i}: {exc}") from exc
        if rec.id in seen:
            raise AnnotationError(f"{path}: duplicate slide id {rec.id!r}")
        seen.add(rec.id)
        records.append(rec)
    return records


def save_manifest(records, path):
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=1))


def label_map_from_annotations(regions, width, height) -> np.ndarray:
    """Paint regions into an int8 label map (-1 = unlabeled).

    Normal regions are painted first so tumor regions win where they overlap.
    """
    labels = np.full((height, width), -1, dtype=np.int8)
    for region in sorted(regions, key=lambda r: r.label.is_tumor):
        x0, y0, x1, y1 = region.bbox
        labels[y0:y1, x0:x1] = int(region.label)
    return labels
