"""Small constructors shared by the test modules."""

import numpy as np

from renalwsi.classifier import PatchPrediction
from renalwsi.labels import ClassLabel
from renalwsi.slide_model import SlideImage


def make_slide(pixels, slide_id="s", mpp=0.5):
    return SlideImage(slide_id, np.asarray(pixels, dtype=np.uint8), mpp)


def solid(width, height, rgb=(0, 0, 0)):
    return make_slide(np.broadcast_to(np.array(rgb, dtype=np.uint8), (height, width, 3)))


def onehot_pred(label, confidence=1.0, coord=(0, 0)):
    """Prediction with ``confidence`` on ``label`` and the rest spread evenly."""
    label = ClassLabel.parse(label)
    probs = np.full(5, (1.0 - confidence) / 4)
    probs[int(label)] = confidence
    return PatchPrediction.from_probs(coord, probs)
