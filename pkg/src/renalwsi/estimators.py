"""scikit-learn style wrappers so the pipeline stages compose with
``Pipeline``, ``clone`` and ``get_params``/``set_params``.

The slide-level classifier's ``X`` is a sequence of patch-prediction pools
(one list of :class:`~renalwsi.classifier.PatchPrediction` per slide) and
``y`` holds the gold slide labels.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .calibration import CalibrationGrid, calibrate
from .evaluation import macro_f1
from .inference import InferenceConfig, aggregate
from .labels import CLASSES, ClassLabel
from .slide_model import DEFAULT_WHITENESS_CUTOFF, compute_tissue_mask
from .tiler import PatchSpec, extract_patches


def _as_list(X, name):
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"{name} must be a sequence, got {type(X).__name__}")
    return list(X)


class TissueMasker(TransformerMixin, BaseEstimator):
    """Slides -> tissue masks. Stateless; ``fit`` only validates params."""

    def __init__(self, whiteness_cutoff=DEFAULT_WHITENESS_CUTOFF):
        self.whiteness_cutoff = whiteness_cutoff

    def fit(self, X=None, y=None):
        if not 0 <= int(self.whiteness_cutoff) <= 255:
            raise ValueError(f"whiteness_cutoff must be in [0, 255], got {self.whiteness_cutoff}")
        self.fitted_ = True
        return self

    def transform(self, X):
        return [compute_tissue_mask(s, self.whiteness_cutoff) for s in _as_list(X, "X")]


class PatchExtractor(TransformerMixin, BaseEstimator):
    """Slides -> lists of admitted tissue patches."""

    def __init__(self, patch_size=224, overlap_fraction="1/3", min_tissue_fraction=0.5,
                 whiteness_cutoff=DEFAULT_WHITENESS_CUTOFF):
        self.patch_size = patch_size
        self.overlap_fraction = overlap_fraction
        self.min_tissue_fraction = min_tissue_fraction
        self.whiteness_cutoff = whiteness_cutoff

    def fit(self, X=None, y=None):
        self.spec_ = PatchSpec(self.patch_size, self.overlap_fraction, self.min_tissue_fraction)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return [
            extract_patches(s, compute_tissue_mask(s, self.whiteness_cutoff), self.spec_) for s in _as_list(X, "X")
        ]


class PercentageRuleClassifier(ClassifierMixin, BaseEstimator):
    """Slide labels from patch pools by confidence filtering and the
    tumor-percentage rule.

    With ``search=True``, ``fit`` grid-searches both thresholds for macro F1
    on the training pools (``confidence_values``/``fraction_values`` override
    the default grid) and the constructor thresholds are ignored. Otherwise
    ``fit`` just freezes the given thresholds.
    """

    def __init__(self, confidence_threshold=0.9, min_tumor_fraction=0.05, search=False,
                 confidence_values=None, fraction_values=None):
        self.confidence_threshold = confidence_threshold
        self.min_tumor_fraction = min_tumor_fraction
        self.search = search
        self.confidence_values = confidence_values
        self.fraction_values = fraction_values

    def fit(self, X, y=None):
        pools = _as_list(X, "X")
        self.classes_ = np.array(CLASSES, dtype=object)
        if self.search:
            if y is None:
                raise ValueError("search=True needs gold labels y")
            y = [ClassLabel.parse(v) for v in _as_list(y, "y")]
            if len(y) != len(pools):
                raise ValueError(f"X has {len(pools)} slides but y has {len(y)} labels")
            grid_kw = {}
            if self.confidence_values is not None:
                grid_kw["confidence_values"] = tuple(self.confidence_values)
            if self.fraction_values is not None:
                grid_kw["fraction_values"] = tuple(self.fraction_values)
            self.calibration_ = calibrate(list(zip(pools, y)), CalibrationGrid(**grid_kw))
            self.config_ = self.calibration_.best_config
        else:
            self.calibration_ = None
            self.config_ = InferenceConfig(self.confidence_threshold, self.min_tumor_fraction)
        return self

    def decisions(self, X):
        check_is_fitted(self, "config_")
        return [aggregate(pool, self.config_) for pool in _as_list(X, "X")]

    def predict(self, X):
        return np.array([d.label for d in self.decisions(X)], dtype=object)

    def transform(self, X):
        """``(n_slides, 5)`` per-class fractions of the filtered pools."""
        return np.array([d.fractions for d in self.decisions(X)], dtype=np.float64).reshape(-1, len(CLASSES))

    def score(self, X, y, sample_weight=None):
        return macro_f1(list(y), list(self.predict(X)))
