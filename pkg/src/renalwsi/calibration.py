"""Joint grid search of the confidence threshold and minimum tumor fraction."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._validation import check_increasing
from .errors import CalibrationError
from .evaluation import macro_f1
from .inference import InferenceConfig, class_fractions, decide, filter_low_confidence


def _default_confidences():
    return tuple(round(0.50 + 0.05 * i, 2) for i in range(10)) + (0.99,)


def _default_fractions():
    return tuple(round(0.01 * i, 2) for i in range(1, 21))


@dataclass(frozen=True)
class CalibrationGrid:
    confidence_values: tuple = _default_confidences()
    fraction_values: tuple = _default_fractions()

    def __post_init__(self):
        object.__setattr__(self, "confidence_values", check_increasing(self.confidence_values, "confidence_values"))
        object.__setattr__(self, "fraction_values", check_increasing(self.fraction_values, "fraction_values"))

    def __len__(self):
        return len(self.confidence_values) * len(self.fraction_values)


@dataclass(frozen=True)
class CalibrationResult:
    best_config: InferenceConfig
    objective: float
    table: tuple  # ((confidence, fraction, macro_f1), ...) in grid order

    def to_json(self) -> dict:
        return {
            "best_config": self.best_config.to_json(),
            "objective": self.objective,
            "table": [{"confidence": c, "fraction": f, "macro_f1": s} for c, f, s in self.table],
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def _score_row(dev, confidence, fractions):
    golds = [gold for _, gold in dev]
    # filtering depends only on the confidence value, so share it across the row
    shares = [class_fractions(filter_low_confidence(pool, confidence)) for pool, _ in dev]
    row = []
    for frac in fractions:
        cfg = InferenceConfig(confidence, frac)
        preds = [decide(s, cfg).label for s in shares]
        row.append((confidence, frac, macro_f1(golds, preds)))
    return row


def calibrate(dev, grid=CalibrationGrid(), workers=1) -> CalibrationResult:
    """Score every grid cell by macro F1 of slide labels on ``dev``.

    ``dev`` is a sequence of ``(predictions, gold label)`` with predictions
    computed once up front. Ties go to the lowest confidence value, then the
    lowest fraction value.
    """
    dev = [(list(pool), gold) for pool, gold in dev]
    if not dev:
        raise CalibrationError("calibration needs at least one dev slide")

    rows_in = grid.confidence_values
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(lambda c: _score_row(dev, c, grid.fraction_values), rows_in))
    else:
        rows = [_score_row(dev, c, grid.fraction_values) for c in rows_in]
    table = tuple(cell for row in rows for cell in row)

    # grid order is (confidence, fraction) ascending, so the first max wins ties
    best = int(np.argmax([s for _, _, s in table]))
    conf, frac, score = table[best]
    return CalibrationResult(InferenceConfig(conf, frac), score, table)
