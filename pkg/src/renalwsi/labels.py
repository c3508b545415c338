"""The five-class label vocabulary and its canonical ordering."""

from enum import IntEnum


class ClassLabel(IntEnum):
    """Slide/patch class. Integer values fix the canonical order used for
    probability vectors and every tie-break in the pipeline."""

    NORMAL = 0
    ONCOCYTOMA = 1
    CHROMOPHOBE_RCC = 2
    CLEAR_CELL_RCC = 3
    PAPILLARY_RCC = 4

    @property
    def key(self) -> str:
        """snake_case name used in every file format."""
        return self.name.lower()

    @property
    def is_tumor(self) -> bool:
        return self is not ClassLabel.NORMAL

    @classmethod
    def parse(cls, value) -> "ClassLabel":
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown class label {value!r}") from None
        raise ValueError(f"unknown class label {value!r}")


CLASSES = tuple(ClassLabel)
N_CLASSES = len(CLASSES)
TUMOR_CLASSES = tuple(c for c in CLASSES if c.is_tumor)
CLASS_KEYS = tuple(c.key for c in CLASSES)

DISPLAY_NAMES = {
    ClassLabel.NORMAL: "Normal",
    ClassLabel.ONCOCYTOMA: "Oncocytoma",
    ClassLabel.CHROMOPHOBE_RCC: "Chromophobe RCC",
    ClassLabel.CLEAR_CELL_RCC: "Clear cell RCC",
    ClassLabel.PAPILLARY_RCC: "Papillary RCC",
}

# Flat base colors of the synthetic class textures. The color heuristic
# classifier matches patches against this same table.
TEXTURE_COLORS = {
    ClassLabel.NORMAL: (236, 160, 200),
    ClassLabel.ONCOCYTOMA: (200, 60, 90),
    ClassLabel.CHROMOPHOBE_RCC: (170, 140, 200),
    ClassLabel.CLEAR_CELL_RCC: (245, 215, 150),
    ClassLabel.PAPILLARY_RCC: (90, 60, 160),
}
