"""Patch classification contract and its backends.

Every backend returns a 5-way probability vector in canonical class order.
Vectors are validated before they leave this module, so downstream code
never sees an invalid distribution.
"""

import base64
import io
import json
import logging
import queue
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ._validation import check_probs, check_unit_interval
from .errors import ClassificationError, PredictionFileError, ProtocolError
from .labels import CLASS_KEYS, N_CLASSES, TEXTURE_COLORS, ClassLabel
from .tiler import PatchCoord

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


def as_distribution(probs) -> np.ndarray:
    """Validated, read-only float64 copy of ``probs``.

    Raises ValueError when entries fall outside [0, 1] or the sum is more
    than 1e-6 away from 1.
    """
    arr = check_probs(probs).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PatchPrediction:
    coord: PatchCoord
    label: ClassLabel
    confidence: float
    probs: np.ndarray
    slide_id: str = None

    @classmethod
    def from_probs(cls, coord, probs, slide_id=None):
        probs = as_distribution(probs)
        # np.argmax returns the first maximum, i.e. the lowest canonical index
        idx = int(np.argmax(probs))
        return cls(PatchCoord(*coord), ClassLabel(idx), float(probs[idx]), probs, slide_id)

    def __eq__(self, other):
        if not isinstance(other, PatchPrediction):
            return NotImplemented
        return (
            self.coord == other.coord
            and self.label == other.label
            and self.confidence == other.confidence
            and self.slide_id == other.slide_id
            and np.array_equal(self.probs, other.probs)
        )

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "x": int(self.coord.x),
            "y": int(self.coord.y),
            "probs": [float(p) for p in self.probs],
        }


class PatchClassifier:
    """Base class for backends. Subclasses implement :meth:`classify`."""

    def classify(self, patch) -> np.ndarray:
        raise NotImplementedError

    def _checked(self, patch):
        try:
            probs = self.classify(patch)
        except ClassificationError as exc:
            if exc.coord is None:
                raise type(exc)(str(exc), patch.coord) from exc
            raise
        try:
            return as_distribution(probs)
        except ValueError as exc:
            raise ClassificationError(f"invalid distribution from {type(self).__name__}: {exc}", patch.coord) from exc

    def predict_proba(self, patches, workers=1) -> np.ndarray:
        """``(n_patches, 5)`` probabilities, in input order for any ``workers``."""
        patches = list(patches)
        if workers > 1 and len(patches) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(self._checked, patches))
        else:
            rows = [self._checked(p) for p in patches]
        return np.array(rows, dtype=np.float64).reshape(len(patches), N_CLASSES)

    def predict(self, patches, workers=1, slide_id=None) -> list:
        patches = list(patches)
        probs = self.predict_proba(patches, workers=workers)
        return [PatchPrediction.from_probs(p.coord, row, slide_id) for p, row in zip(patches, probs)]


def oracle_classify(patch, ground_truth, softness=0.0) -> np.ndarray:
    """Probabilities from the majority ground-truth label under the patch.

    ``ground_truth`` is an int map with class indices and -1 for unlabeled
    pixels. The majority class gets ``1 - softness``; the rest is spread
    evenly over the other four. Footprints with no labeled pixel count as
    Normal.
    """
    softness = check_unit_interval(softness, "softness", upper_open=True)
    x, y = patch.coord
    size = patch.size
    window = np.asarray(ground_truth)[y : y + size, x : x + size]
    counts = np.bincount(window[window >= 0].ravel().astype(np.intp), minlength=N_CLASSES)
    winner = int(np.argmax(counts)) if counts.any() else int(ClassLabel.NORMAL)
    probs = np.full(N_CLASSES, softness / (N_CLASSES - 1))
    probs[winner] = 1.0 - softness
    return probs


class OracleClassifier(PatchClassifier):
    """Reads answers off a per-pixel ground-truth label map."""

    def __init__(self, ground_truth, softness=0.0):
        self.ground_truth = np.asarray(ground_truth)
        self.softness = check_unit_interval(softness, "softness", upper_open=True)

    def classify(self, patch):
        return oracle_classify(patch, self.ground_truth, self.softness)


class HeuristicColorClassifier(PatchClassifier):
    """Nearest-texture-color classifier for synthetic slides.

    The mean color of the patch's tissue pixels is compared against
    ``TEXTURE_COLORS``; probabilities are a softmax of negative squared
    distances scaled by ``2 * color_sigma**2``. Patches straddling two
    textures land between colors and come out with low confidence.
    """

    def __init__(self, color_sigma=15.0, whiteness_cutoff=220, colors=None):
        if not color_sigma > 0:
            raise ValueError(f"color_sigma must be > 0, got {color_sigma}")
        self.color_sigma = float(color_sigma)
        self.whiteness_cutoff = int(whiteness_cutoff)
        colors = colors or TEXTURE_COLORS
        self.colors = np.array([colors[c] for c in ClassLabel], dtype=np.float64)

    def classify(self, patch):
        px = np.asarray(patch.pixels, dtype=np.float64).reshape(-1, 3)
        tissue = px.min(axis=1) < self.whiteness_cutoff
        if tissue.any():
            px = px[tissue]
        mean = px.mean(axis=0)
        d2 = ((self.colors - mean) ** 2).sum(axis=1)
        logits = -d2 / (2.0 * self.color_sigma**2)
        logits -= logits.max()
        w = np.exp(logits)
        return w / w.sum()


def load_predictions(path) -> list:
    """Parse a prediction JSONL file, recomputing label and confidence.

    Raises PredictionFileError naming the 1-based line number.
    """
    preds = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                coord = (int(rec["x"]), int(rec["y"]))
                probs = rec["probs"]
                slide_id = rec.get("slide_id")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PredictionFileError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
            try:
                preds.append(PatchPrediction.from_probs(coord, probs, slide_id))
            except ValueError as exc:
                raise PredictionFileError(f"{path}:{lineno}: invalid distribution ({exc})") from exc
    return preds


def save_predictions(predictions, path, append=False):
    with open(path, "a" if append else "w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_json()) + "\n")


def group_by_slide(predictions) -> dict:
    pools = {}
    for p in predictions:
        pools.setdefault(p.slide_id, []).append(p)
    return pools


def encode_patch_png(pixels) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_patch_png(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


_EOF = object()


class _Worker:
    """One child process speaking the line protocol."""

    def __init__(self, command, timeout):
        self.timeout = timeout
        self.next_id = 0
        self.proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self.lines = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self.lines.put(line)
        self.lines.put(_EOF)

    def send(self, msg):
        try:
            self.proc.stdin.write(json.dumps(msg) + "\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ClassificationError(self._exit_diagnostic(f"cannot write to external classifier ({exc})")) from exc

    def receive(self, coord=None) -> dict:
        try:
            line = self.lines.get(timeout=self.timeout)
        except queue.Empty:
            self.kill()
            raise ClassificationError(f"external classifier timed out after {self.timeout:g} s", coord) from None
        if line is _EOF:
            raise ClassificationError(self._exit_diagnostic("external classifier exited"), coord)
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            raise ProtocolError(f"external classifier sent non-JSON line {line.strip()[:80]!r}", coord) from None
        if not isinstance(msg, dict):
            raise ProtocolError(f"external classifier sent {msg!r}", coord)
        return msg

    def _exit_diagnostic(self, what):
        try:
            code = self.proc.wait(timeout=1.0)
        except subprocess.TimeoutExpired:
            code = None
        return f"{what}; exit code {code}"

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
        self.proc.wait()

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5.0)
            except (OSError, subprocess.TimeoutExpired):
                self.kill()
        self._reader.join(timeout=1.0)
        self.proc.stdout.close()


class ExternalProcessClassifier(PatchClassifier):
    """Bridge to an external model over newline-delimited JSON on stdio.

    ``workers`` child processes are launched; each serves one request at a
    time. Handshake and message shapes::

        -> {"type": "hello", "patch_size": 224, "classes": [...]}
        <- {"type": "ready"}
        -> {"type": "classify", "id": 0, "png_b64": "..."}
        <- {"type": "probs", "id": 0, "probs": [p0, p1, p2, p3, p4]}

    Use as a context manager, or call :meth:`start` and :meth:`close`.
    """

    def __init__(self, command, workers=1, timeout=DEFAULT_TIMEOUT, patch_size=224):
        self.command = list(command)
        self.workers = int(workers)
        self.timeout = float(timeout)
        self.patch_size = int(patch_size)
        self._idle = None
        self._all = []

    def start(self):
        if self._idle is not None:
            return self
        self._idle = queue.Queue()
        try:
            for _ in range(max(1, self.workers)):
                w = _Worker(self.command, self.timeout)
                self._all.append(w)
                w.send({"type": "hello", "patch_size": self.patch_size, "classes": list(CLASS_KEYS)})
                reply = w.receive()
                if reply.get("type") != "ready":
                    raise ProtocolError(f"expected ready after hello, got {reply!r}")
                self._idle.put(w)
        except Exception:
            self.close()
            raise
        return self

    def close(self):
        for w in self._all:
            w.close()
        self._all = []
        self._idle = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def classify(self, patch):
        if self._idle is None:
            self.start()
        w = self._idle.get()
        try:
            req_id = w.next_id
            w.next_id += 1
            w.send({"type": "classify", "id": req_id, "png_b64": encode_patch_png(patch.pixels)})
            reply = w.receive(patch.coord)
            if reply.get("type") != "probs":
                raise ProtocolError(f"unexpected message type {reply.get('type')!r}", patch.coord)
            if reply.get("id") != req_id:
                raise ProtocolError(f"response id {reply.get('id')!r} does not match request id {req_id}", patch.coord)
            try:
                return as_distribution(reply.get("probs"))
            except ValueError as exc:
                raise ProtocolError(f"invalid probs from external classifier: {exc}", patch.coord) from exc
        finally:
            self._idle.put(w)
