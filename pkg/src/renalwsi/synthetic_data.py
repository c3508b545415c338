"""Deterministic labeled synthetic slides for end-to-end checks.

Each class is a flat color from ``TEXTURE_COLORS`` plus seeded uniform
noise on a white background. Gold labels come from applying the slide
decision rule to exact region areas, so a perfect patch classifier should
reproduce them. They test the pipeline, not histology.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SynthSpecError
from .inference import InferenceConfig, decide
from .labels import CLASSES, N_CLASSES, TEXTURE_COLORS, ClassLabel
from .slide_model import (
    DEFAULT_MPP,
    RegionAnnotation,
    SlideImage,
    SlideRecord,
    label_map_from_annotations,
    save_annotations,
    save_manifest,
    save_slide,
)

# Test-set composition of the internal resection cohort.
TEST_SET_COUNTS = {
    ClassLabel.NORMAL: 10,
    ClassLabel.ONCOCYTOMA: 10,
    ClassLabel.CHROMOPHOBE_RCC: 18,
    ClassLabel.CLEAR_CELL_RCC: 20,
    ClassLabel.PAPILLARY_RCC: 20,
}


@dataclass(frozen=True)
class SynthRegion:
    label: ClassLabel
    bbox: tuple
    texture_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label", ClassLabel.parse(self.label))
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))


@dataclass(frozen=True)
class SynthSpec:
    width: int
    height: int
    regions: tuple = ()
    noise: int = 10
    seed: int = 0
    slide_id: str = "synthetic"
    microns_per_pixel: float = DEFAULT_MPP
    rule: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if self.width < 1 or self.height < 1:
            raise SynthSpecError(f"slide must be at least 1x1, got {self.width}x{self.height}")
        if not 0 <= self.noise <= 255:
            raise SynthSpecError(f"noise amplitude must lie in [0, 255], got {self.noise}")
        for i, r in enumerate(self.regions):
            x0, y0, x1, y1 = r.bbox
            if not (0 <= x0 < x1 <= self.width and 0 <= y0 < y1 <= self.height):
                raise SynthSpecError(f"region {i} bbox {list(r.bbox)} outside {self.width}x{self.height} slide")
        tumors = [r for r in self.regions if r.label.is_tumor]
        for i, a in enumerate(tumors):
            for b in tumors[i + 1 :]:
                if _overlap(a.bbox, b.bbox):
                    raise SynthSpecError(
                        f"tumor regions {a.label.key} {list(a.bbox)} and {b.label.key} {list(b.bbox)} overlap"
                    )

    def annotations(self) -> list:
        return [RegionAnnotation(r.label, r.bbox) for r in self.regions]


def _overlap(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _texture(shape, label, noise, rng):
    base = np.array(TEXTURE_COLORS[label], dtype=np.int16)
    jitter = rng.integers(-noise, noise + 1, size=shape + (3,), dtype=np.int16) if noise else 0
    return np.clip(base + jitter, 0, 255).astype(np.uint8)


def gold_label(ground_truth, rule=InferenceConfig()) -> ClassLabel:
    """Decision rule applied to exact per-class tissue areas."""
    counts = np.bincount(ground_truth[ground_truth >= 0].ravel().astype(np.intp), minlength=N_CLASSES)
    total = int(counts.sum())
    fractions = [int(k) / total for k in counts] if total else [0.0] * N_CLASSES
    return decide(fractions, rule).label


def generate_slide(spec: SynthSpec):
    """Render ``spec``; returns ``(SlideImage, ground_truth, gold_label)``.

    ``ground_truth`` is an int8 map of canonical class indices with -1 on
    background. Tumor regions are painted over Normal ones.
    """
    pixels = np.full((spec.height, spec.width, 3), 255, dtype=np.uint8)
    order = sorted(range(len(spec.regions)), key=lambda i: spec.regions[i].label.is_tumor)
    for i in order:
        r = spec.regions[i]
        x0, y0, x1, y1 = r.bbox
        rng = np.random.default_rng([spec.seed, r.texture_seed, i])
        pixels[y0:y1, x0:x1] = _texture((y1 - y0, x1 - x0), r.label, spec.noise, rng)
    truth = label_map_from_annotations(spec.annotations(), spec.width, spec.height)
    slide = SlideImage(spec.slide_id, pixels, spec.microns_per_pixel)
    return slide, truth, gold_label(truth, spec.rule)


def random_layout(label, width, height, rng, slide_id="synthetic", seed=0, noise=10) -> SynthSpec:
    """A slide whose gold label is ``label`` with a wide margin.

    Normal tissue fills the slide inside a random white border. A tumor
    slide adds one block of its class spanning 60-85% of each dimension,
    large enough to dominate several patches under any 1/3-overlap grid.
    """
    label = ClassLabel.parse(label)
    m = [int(v) for v in rng.integers(0, 25, size=4)]
    regions = [SynthRegion(ClassLabel.NORMAL, (m[0], m[1], width - m[2], height - m[3]), int(rng.integers(2**31)))]
    if label.is_tumor:
        tw = int(width * rng.uniform(0.60, 0.85))
        th = int(height * rng.uniform(0.60, 0.85))
        x0 = int(rng.integers(m[0], width - m[2] - tw + 1))
        y0 = int(rng.integers(m[1], height - m[3] - th + 1))
        regions.append(SynthRegion(label, (x0, y0, x0 + tw, y0 + th), int(rng.integers(2**31))))
    return SynthSpec(width, height, tuple(regions), noise=noise, seed=seed, slide_id=slide_id)


def generate_dataset(out_dir, counts=None, size_range=(512, 512), seed=0, split="test", noise=10, prefix="slide"):
    """Write slides, sidecars, annotations and ``manifest.json`` to ``out_dir``.

    ``counts`` maps class -> number of slides (default: the 10/10/18/20/20
    test composition). Returns the list of SlideRecord written.
    """
    counts = {ClassLabel.parse(k): int(v) for k, v in (counts or TEST_SET_COUNTS).items()}
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(exist_ok=True)
    lo, hi = size_range
    rng = np.random.default_rng(seed)
    records = []
    index = 0
    for label in CLASSES:
        for _ in range(counts.get(label, 0)):
            slide_id = f"{prefix}_{index:04d}"
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            spec = random_layout(label, w, h, rng, slide_id=slide_id, seed=seed, noise=noise)
            slide, _, gold = generate_slide(spec)
            if gold is not label:
                raise SynthSpecError(f"{slide_id}: layout produced gold {gold.key}, expected {label.key}")
            save_slide(slide, out / "images" / f"{slide_id}.png")
            save_annotations(spec.annotations(), out / "annotations" / f"{slide_id}.json")
            records.append(
                SlideRecord(
                    id=slide_id,
                    image=f"images/{slide_id}.png",
                    gold_label=gold,
                    split=split,
                    annotations=f"annotations/{slide_id}.json",
                    root=out,
                )
            )
            index += 1
    save_manifest(records, out / "manifest.json")
    return records
