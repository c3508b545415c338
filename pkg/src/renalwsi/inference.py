"""Slide-level decision from a pool of patch predictions.

The pool is confidence-filtered, per-class shares are counted over what
remains, and a tumor class wins when its share is strictly above the
minimum tumor fraction. Otherwise the slide is Normal.
"""

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_unit_interval
from .labels import CLASSES, N_CLASSES, TUMOR_CLASSES, ClassLabel
from .tiler import extract_patches

_TUMOR_IDX = np.array([int(c) for c in TUMOR_CLASSES])


@dataclass(frozen=True)
class InferenceConfig:
    confidence_threshold: float = 0.9
    min_tumor_fraction: float = 0.05

    def __post_init__(self):
        for name in ("confidence_threshold", "min_tumor_fraction"):
            object.__setattr__(self, name, check_unit_interval(getattr(self, name), name))

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SlideDecision:
    label: ClassLabel
    fractions: tuple
    pool_size_raw: int
    pool_size_filtered: int
    config: InferenceConfig
    slide_id: str = None

    def fraction(self, label) -> float:
        return self.fractions[int(label)]

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "label": self.label.key,
            "fractions": {c.key: float(f) for c, f in zip(CLASSES, self.fractions)},
            "pool_size_raw": self.pool_size_raw,
            "pool_size_filtered": self.pool_size_filtered,
            "config": self.config.to_json(),
        }

    @classmethod
    def from_json(cls, data):
        fr = data["fractions"]
        return cls(
            label=ClassLabel.parse(data["label"]),
            fractions=tuple(float(fr[c.key]) for c in CLASSES),
            pool_size_raw=int(data["pool_size_raw"]),
            pool_size_filtered=int(data["pool_size_filtered"]),
            config=InferenceConfig(**data["config"]),
            slide_id=data.get("slide_id"),
        )


def filter_low_confidence(pool, threshold) -> list:
    """Keep predictions with confidence >= threshold, in their original order."""
    return [p for p in pool if p.confidence >= threshold]


def class_fractions(pool) -> tuple:
    """Share of the pool predicted as each class; all zeros for an empty pool."""
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for p in pool:
        counts[int(p.label)] += 1
    n = int(counts.sum())
    if n == 0:
        return (0.0,) * N_CLASSES
    return tuple(int(k) / n for k in counts)


def decide(fractions, config=InferenceConfig(), *, pool_size_raw=0, pool_size_filtered=0, slide_id=None):
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (N_CLASSES,) or np.any(fr < 0):
        raise ValueError(f"fractions must be {N_CLASSES} non-negative values, got {fractions!r}")
    total = fr.sum()
    if total != 0 and abs(total - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1 or be all zero, got sum {total}")

    tumor = fr[_TUMOR_IDX]
    best = int(np.argmax(tumor))  # first maximum -> canonical tie-break
    label = TUMOR_CLASSES[best] if tumor[best] > config.min_tumor_fraction else ClassLabel.NORMAL
    return SlideDecision(label, tuple(float(f) for f in fr), pool_size_raw, pool_size_filtered, config, slide_id)


def aggregate(pool, config=InferenceConfig(), slide_id=None):
    """filter -> class_fractions -> decide for an already classified pool."""
    pool = list(pool)
    kept = filter_low_confidence(pool, config.confidence_threshold)
    return decide(
        class_fractions(kept), config, pool_size_raw=len(pool), pool_size_filtered=len(kept), slide_id=slide_id
    )


class SlideInference(NamedTuple):
    decision: SlideDecision
    retained: list  # PatchPrediction after confidence filtering
    pool: list  # every PatchPrediction before filtering


def infer_slide(slide, mask, spec, classifier, config=InferenceConfig(), workers=1) -> SlideInference:
    patches = extract_patches(slide, mask, spec)
    pool = classifier.predict(patches, workers=workers, slide_id=slide.id)
    retained = filter_low_confidence(pool, config.confidence_threshold)
    decision = decide(
        class_fractions(retained),
        config,
        pool_size_raw=len(pool),
        pool_size_filtered=len(retained),
        slide_id=slide.id,
    )
    return SlideInference(decision, retained, pool)


def load_decisions(path) -> list:
    with open(path) as fh:
        return [SlideDecision.from_json(json.loads(line)) for line in fh if line.strip()]


def save_decisions(decisions, path):
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_json()) + "\n")
