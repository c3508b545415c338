"""Command-line entry point: ``renalwsi {synth,tile,infer,calibrate,evaluate,visualize}``.

Exit codes: 0 on success, 1 on a runtime pipeline failure, 2 on an invalid
configuration or command line.
"""

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

from .calibration import CalibrationGrid, calibrate
from .classifier import (
    ExternalProcessClassifier,
    HeuristicColorClassifier,
    OracleClassifier,
    group_by_slide,
    load_predictions,
    save_predictions,
)
from .errors import ConfigError, PipelineError
from .evaluation import BootstrapConfig, evaluate_dataset, roc_rows
from .inference import InferenceConfig, aggregate, filter_low_confidence, infer_slide, load_decisions, save_decisions
from .labels import ClassLabel
from .slide_model import (
    compute_tissue_mask,
    label_map_from_annotations,
    load_annotations,
    load_manifest,
    load_slide,
)
from .synthetic_data import TEST_SET_COUNTS, generate_dataset
from .tiler import PatchSpec, export_patches, extract_patches, extract_roi_patches, write_index
from .visualization import Palette, render_legend, render_overlay, save_png

logger = logging.getLogger("renalwsi")

BACKENDS = ("oracle", "heuristic", "external", "file")

DEFAULTS = {
    "whiteness_cutoff": 220,
    "workers": 1,
    "patch": {"patch_size": 224, "overlap_fraction": "1/3", "min_tissue_fraction": 0.5},
    "inference": {"confidence_threshold": 0.9, "min_tumor_fraction": 0.05},
    "calibration": {
        "confidence_values": list(CalibrationGrid().confidence_values),
        "fraction_values": list(CalibrationGrid().fraction_values),
    },
    "bootstrap": {"iterations": 10000, "seed": 0, "percentiles": [2.5, 97.5]},
    "palette": Palette().to_json(),
    "downsample": 4,
    "classifier": {
        "backend": "oracle",
        "softness": 0.0,
        "color_sigma": 15.0,
        "command": [sys.executable, "-m", "renalwsi.stub_classifier"],
        "timeout": 30.0,
        "predictions": None,
    },
    "synth": {
        "counts": {c.key: n for c, n in TEST_SET_COUNTS.items()},
        "size_range": [512, 512],
        "seed": 0,
        "noise": 10,
        "split": "test",
    },
}

# sections whose keys are free-form
_OPEN_KEYS = {("palette", "colors"), ("synth", "counts")}


class PipelineConfig:
    """Validated view over the merged configuration dictionary."""

    def __init__(self, raw, source=None, text=None):
        self.raw = raw
        self._source = source
        self._text = text
        self.whiteness_cutoff = self._build("whiteness_cutoff", self._cutoff)
        self.workers = self._build("workers", self._workers)
        self.patch = self._build("patch", lambda d: PatchSpec(**d))
        self.inference = self._build("inference", lambda d: InferenceConfig(**d))
        self.grid = self._build("calibration", lambda d: CalibrationGrid(tuple(d["confidence_values"]), tuple(d["fraction_values"])))
        self.bootstrap = self._build(
            "bootstrap", lambda d: BootstrapConfig(d["iterations"], d["seed"], tuple(d["percentiles"]))
        )
        self.palette = self._build("palette", Palette.from_json)
        self.downsample = self._build("downsample", self._workers)
        self.classifier = self._build("classifier", self._classifier)
        self.synth = self._build("synth", self._synth)

    def _where(self, key, detail=""):
        # line of the section key, refined to a named sub-key below it when possible
        if self._source is None:
            return "config"
        found = None
        if self._text is not None:
            lines = self._text.splitlines()
            for lineno, line in enumerate(lines, 1):
                if f'"{key}"' in line:
                    found = lineno
                    break
            section = self.raw.get(key)
            if found and isinstance(section, dict):
                subs = [k for k in section if k in detail]
                for lineno in range(found, len(lines) + 1):
                    if any(f'"{k}"' in lines[lineno - 1] for k in subs):
                        found = lineno
                        break
        return f"{self._source}:{found}" if found else str(self._source)

    def _build(self, key, fn):
        try:
            return fn(self.raw[key])
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{self._where(key, str(exc))}: invalid '{key}': {exc}") from exc

    @staticmethod
    def _cutoff(v):
        if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= 255:
            raise ValueError(f"must be an integer in [0, 255], got {v!r}")
        return v

    @staticmethod
    def _workers(v):
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ValueError(f"must be an integer >= 1, got {v!r}")
        return v

    @staticmethod
    def _classifier(d):
        if d["backend"] not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {d['backend']!r}")
        if not 0 <= float(d["softness"]) < 1:
            raise ValueError(f"softness must lie in [0, 1), got {d['softness']}")
        if not float(d["color_sigma"]) > 0 or not float(d["timeout"]) > 0:
            raise ValueError("color_sigma and timeout must be > 0")
        if isinstance(d["command"], str) or not d["command"]:
            raise ValueError("command must be a nonempty list of arguments")
        return d

    @staticmethod
    def _synth(d):
        counts = {ClassLabel.parse(k): int(v) for k, v in d["counts"].items()}
        if any(v < 0 for v in counts.values()):
            raise ValueError("counts must be non-negative")
        lo, hi = (int(v) for v in d["size_range"])
        if not 1 <= lo <= hi:
            raise ValueError(f"size_range must satisfy 1 <= low <= high, got {d['size_range']}")
        return {**d, "counts": counts, "size_range": (lo, hi)}


def _merge(base, update, path=()):
    for key, value in update.items():
        if key not in base and path not in _OPEN_KEYS:
            raise ConfigError(f"unknown config key '{'.'.join(path + (key,))}'")
        if isinstance(value, dict) and isinstance(base.get(key), dict) and path + (key,) not in _OPEN_KEYS:
            _merge(base[key], value, path + (key,))
        else:
            base[key] = value


def _parse_override(item):
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = parsed
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


def load_config(path=None, overrides=()) -> PipelineConfig:
    raw = copy.deepcopy(DEFAULTS)
    text = None
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}:1: config must be a JSON object")
        _merge(raw, data)
    for item in overrides:
        _merge(raw, _parse_override(item))
    return PipelineConfig(raw, path, text)


def _select(records, split):
    return [r for r in records if split is None or r.split == split]


def _slide_inputs(rec, cfg):
    slide = load_slide(rec.image_path, rec.id)
    return slide, compute_tissue_mask(slide, cfg.whiteness_cutoff)


def _ground_truth(rec, slide):
    if rec.annotations_path is None:
        raise PipelineError(f"slide {rec.id}: oracle backend needs an annotations file")
    regions = load_annotations(rec.annotations_path, slide)
    return label_map_from_annotations(regions, slide.width, slide.height)


class _Backend:
    """Yields the raw prediction pool of each manifest slide."""

    def __init__(self, cfg):
        self.cfg = cfg
        c = cfg.classifier
        self.kind = c["backend"]
        self.external = None
        self.file_pools = None
        if self.kind == "external":
            self.external = ExternalProcessClassifier(
                c["command"], workers=cfg.workers, timeout=c["timeout"], patch_size=cfg.patch.patch_size
            ).start()
        elif self.kind == "file":
            if not c["predictions"]:
                raise ConfigError("classifier.predictions must name a JSONL file for the file backend")
            self.file_pools = group_by_slide(load_predictions(c["predictions"]))
        self.heuristic = HeuristicColorClassifier(c["color_sigma"], cfg.whiteness_cutoff)

    def pool(self, rec):
        if self.kind == "file":
            return self.file_pools.get(rec.id, [])
        slide, mask = _slide_inputs(rec, self.cfg)
        patches = extract_patches(slide, mask, self.cfg.patch)
        if self.kind == "oracle":
            model = OracleClassifier(_ground_truth(rec, slide), self.cfg.classifier["softness"])
        elif self.kind == "heuristic":
            model = self.heuristic
        else:
            model = self.external
        return model.predict(patches, workers=self.cfg.workers, slide_id=rec.id)

    def close(self):
        if self.external is not None:
            self.external.close()


def cmd_synth(args, cfg):
    s = cfg.synth
    records = generate_dataset(
        args.out, counts=s["counts"], size_range=s["size_range"], seed=s["seed"], split=s["split"], noise=s["noise"]
    )
    print(f"wrote {len(records)} slides to {args.out}")


def cmd_tile(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = out / "index.jsonl"
    index.write_text("")
    total = 0
    for rec in _select(load_manifest(args.manifest), args.split):
        slide, mask = _slide_inputs(rec, cfg)
        if args.roi:
            roi = extract_roi_patches(slide, load_annotations(rec.annotations_path, slide), cfg.patch, mask)
            if roi.skipped:
                logger.info("%s: skipped %d regions smaller than a patch", rec.id, roi.skipped)
            patches = [p for p, _ in roi.patches]
            records = export_patches(rec.id, patches, out, [lab for _, lab in roi.patches])
        else:
            records = export_patches(rec.id, extract_patches(slide, mask, cfg.patch), out)
        write_index(records, index, append=True)
        total += len(records)
    print(f"exported {total} patches to {out}")


def cmd_infer(args, cfg):
    records = _select(load_manifest(args.manifest), args.split)
    backend = _Backend(cfg)
    decisions, retained = [], []
    try:
        for rec in records:
            try:
                pool = backend.pool(rec)
            except PipelineError as exc:
                raise PipelineError(f"slide {rec.id}: {exc}") from exc
            decisions.append(aggregate(pool, cfg.inference, slide_id=rec.id))
            retained.extend(filter_low_confidence(pool, cfg.inference.confidence_threshold))
    finally:
        backend.close()
    save_decisions(decisions, args.out)
    if args.predictions_out:
        save_predictions(retained, args.predictions_out)
    print(f"wrote {len(decisions)} decisions to {args.out}")


def cmd_calibrate(args, cfg):
    records = _select(load_manifest(args.manifest), args.split)
    backend = _Backend(cfg)
    try:
        dev = [(backend.pool(rec), rec.gold_label) for rec in records]
    finally:
        backend.close()
    result = calibrate(dev, cfg.grid, workers=cfg.workers)
    result.save(args.out)
    best = result.best_config
    print(
        f"best confidence_threshold={best.confidence_threshold} "
        f"min_tumor_fraction={best.min_tumor_fraction} macro_f1={result.objective:.4f}"
    )


def cmd_evaluate(args, cfg):
    gold = {r.id: r.gold_label for r in load_manifest(args.manifest)}
    pairs = []
    for d in load_decisions(args.decisions):
        if d.slide_id not in gold:
            raise PipelineError(f"decision for unknown slide {d.slide_id!r}")
        pairs.append((d, gold[d.slide_id]))
    report = evaluate_dataset(pairs, cfg.bootstrap, workers=cfg.workers)
    report.save(args.out)
    roc_path = Path(args.roc_out) if args.roc_out else Path(args.out).with_suffix(".roc.csv")
    with open(roc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "threshold", "fpr", "tpr"])
        writer.writerows(roc_rows(pairs))
    avg = report.average
    print(" ".join(f"{m}={avg[m].value:.3f}" for m in avg))


def cmd_visualize(args, cfg):
    slide = load_slide(args.slide)
    slide_id = args.slide_id or slide.id
    preds = [p for p in load_predictions(args.predictions) if p.slide_id in (None, slide_id)]
    preds = filter_low_confidence(preds, cfg.inference.confidence_threshold)
    overlay = render_overlay(slide, preds, cfg.palette, cfg.downsample, cfg.patch.patch_size)
    save_png(overlay, args.out)
    legend = Path(args.legend_out) if args.legend_out else Path(args.out).with_suffix(".legend.png")
    save_png(render_legend(cfg.palette), legend)
    print(f"wrote {args.out} ({len(preds)} patches) and {legend}")


def build_parser():
    parser = argparse.ArgumentParser(prog="renalwsi", description="Whole-slide renal tumor classification pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. inference.confidence_threshold=0.85")
    common.add_argument("--workers", type=int, help="parallel classification/bootstrap workers")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--spec", help="JSON file with synth settings (counts, size_range, seed, noise, split)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", parents=[common], help="export patches and a JSONL index")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--split")
    p.add_argument("--roi", action="store_true", help="tile annotated regions and attach their labels")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("infer", parents=[common], help="classify slides")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="decisions JSONL")
    p.add_argument("--predictions-out", help="write retained patch predictions JSONL")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--predictions", help="prediction JSONL for the file backend")
    p.add_argument("--split")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("calibrate", parents=[common], help="grid-search the inference thresholds")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--predictions", help="prediction JSONL for the file backend")
    p.add_argument("--split", default="dev")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="metrics report with bootstrap CIs")
    p.add_argument("decisions")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--roc-out", help="ROC CSV (default: <out>.roc.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", parents=[common], help="render a class overlay PNG")
    p.add_argument("slide")
    p.add_argument("predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id")
    p.add_argument("--legend-out")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "backend", None):
        overrides.append(f"classifier.backend={args.backend}")
    if getattr(args, "predictions", None) and args.command in ("infer", "calibrate"):
        overrides.append(f"classifier.predictions={json.dumps(args.predictions)}")
    try:
        if getattr(args, "spec", None):
            spec_text = Path(args.spec).read_text()
            try:
                overrides.append("synth=" + json.dumps(json.loads(spec_text)))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.spec}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError) as exc:
        print(f"renalwsi: config error: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"renalwsi: config error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, OSError, ValueError) as exc:
        print(f"renalwsi: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
