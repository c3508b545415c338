"""Acceptance criteria for the pipeline, one test per criterion.

Each test is reported as a PASS/FAIL line in the terminal summary.
"""

import sys
import time
from itertools import product

import numpy as np
import pytest

from helpers import make_slide, onehot_pred
from oracles import coverage_bitmap, macro_f1_ref, pairwise_auc, rule_label
from renalwsi.calibration import CalibrationGrid, calibrate
from renalwsi.classifier import (
    ExternalProcessClassifier,
    HeuristicColorClassifier,
    OracleClassifier,
    PatchPrediction,
)
from renalwsi.errors import ProtocolError
from renalwsi.evaluation import (
    BootstrapConfig,
    bootstrap_ci,
    confusion,
    evaluate_dataset,
    per_class_metrics,
    resample_indices,
    roc_auc,
)
from renalwsi.inference import InferenceConfig, SlideDecision, aggregate, filter_low_confidence, infer_slide
from renalwsi.labels import CLASSES, TEXTURE_COLORS, TUMOR_CLASSES
from renalwsi.slide_model import (
    compute_tissue_mask,
    label_map_from_annotations,
    load_annotations,
    load_manifest,
    load_slide,
)
from renalwsi.synthetic_data import TEST_SET_COUNTS, generate_dataset
from renalwsi.tiler import Patch, PatchCoord, PatchSpec, grid_coords
from renalwsi.visualization import DEFAULT_COLORS, Palette, png_bytes, render_overlay

N, ONC, CH, CC, PAP = CLASSES


def test_end_to_end_oracle_run(tmp_path):
    start = time.perf_counter()
    assert [TEST_SET_COUNTS[c] for c in CLASSES] == [10, 10, 18, 20, 20]
    generate_dataset(tmp_path, seed=1)
    records = load_manifest(tmp_path / "manifest.json")
    assert len(records) == 78
    golds, preds = [], []
    for rec in records:
        slide = load_slide(rec.image_path, rec.id)
        assert (slide.width, slide.height) == (512, 512)
        truth = label_map_from_annotations(load_annotations(rec.annotations_path, slide), slide.width, slide.height)
        result = infer_slide(slide, compute_tissue_mask(slide), PatchSpec(), OracleClassifier(truth), InferenceConfig())
        golds.append(rec.gold_label)
        preds.append(result.decision.label)
    elapsed = time.perf_counter() - start
    cm = confusion(golds, preds)
    assert golds == preds
    assert cm.classes == CLASSES
    assert np.array_equal(cm.counts, np.diag([10, 10, 18, 20, 20]))
    assert elapsed < 120, f"took {elapsed:.1f}s"


@pytest.mark.parametrize("tumor", TUMOR_CLASSES, ids=lambda c: c.key)
def test_decision_rule_boundary(tumor):
    at = [onehot_pred(tumor)] * 5 + [onehot_pred(N)] * 95
    assert aggregate(at).fraction(tumor) == 0.05
    assert aggregate(at).label is N
    above = at + [onehot_pred(tumor)]
    assert aggregate(above).label is tumor


def test_confidence_filter_semantics():
    pool = [onehot_pred(CC, c) for c in (0.95, 0.9, 0.89)]
    kept = filter_low_confidence(pool, 0.9)
    assert len(kept) == 2
    assert [p.confidence for p in kept] == [0.95, 0.9]


def test_stride_and_coverage():
    rng = np.random.default_rng(20240501)
    spec = PatchSpec()
    assert spec.stride == 149
    for w, h in rng.integers(224, 2001, size=(500, 2)):
        w, h = int(w), int(h)
        coords = grid_coords(w, h, spec)
        covered = coverage_bitmap(w, h, coords, 224)
        assert int((covered == 0).sum()) == 0, (w, h)
        assert all(0 <= x <= w - 224 and 0 <= y <= h - 224 for x, y in coords)
        for axis in (sorted({c.x for c in coords}), sorted({c.y for c in coords})):
            gaps = np.diff(axis)
            # every neighbor pair except the clamped tail steps by exactly one stride
            assert (gaps[:-1] == 149).all() and (len(gaps) == 0 or 0 < gaps[-1] <= 149)


def test_aggregation_permutation_invariance():
    rng = np.random.default_rng(7)
    conf_choices = np.array([0.5, 0.89, 0.9, 0.95, 1.0])
    for _ in range(1000):
        n = int(rng.integers(0, 80))
        pool = []
        for i in range(n):
            label = CLASSES[int(rng.integers(0, 5))]
            conf = float(conf_choices[rng.integers(0, 5)]) if rng.random() < 0.5 else float(rng.uniform(0.2, 1.0))
            pool.append(onehot_pred(label, conf, coord=(i, 0)))
        base = aggregate(pool, slide_id="s")
        assert isinstance(base, SlideDecision)
        shuffled = [pool[i] for i in rng.permutation(n)]
        assert aggregate(shuffled, slide_id="s") == base
        assert aggregate(pool[::-1], slide_id="s") == base


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        if rng.random() < 0.5:
            scores = rng.integers(0, 6, size=n) / 5  # heavy ties
        else:
            scores = rng.random(n)
        auc = roc_auc(scores.tolist(), labels.tolist())
        assert abs(auc - float(pairwise_auc(scores.tolist(), labels.tolist()))) <= 1e-12
    assert roc_auc([0.9, 0.7, 0.7, 0.1], [True, True, False, False]) == 0.875


def test_per_class_metric_identity():
    tp, fp, fn, tn = 8, 0, 2, 68
    golds = [ONC] * (tp + fn) + [N] * (fp + tn)
    preds = [ONC] * tp + [N] * fn + [ONC] * fp + [N] * tn
    m = per_class_metrics(confusion(golds, preds), ONC)
    assert (round(m.precision, 2), round(m.recall, 2), round(m.f1, 2), round(m.accuracy, 2)) == (1.00, 0.80, 0.89, 0.97)


def _pairs(n=60, seed=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        gold = CLASSES[i % 5]
        fr = rng.dirichlet(np.ones(5)) + 0.6 * np.eye(5)[int(gold)]
        fr = fr / fr.sum()
        pred = gold if rng.random() < 0.75 else CLASSES[int(rng.integers(0, 5))]
        out.append((SlideDecision(pred, tuple(fr), 10, 10, InferenceConfig(), f"s{i}"), gold))
    return out


def test_bootstrap_reproducibility_and_exact_case():
    cfg = BootstrapConfig(10_000, seed=123)
    pairs = _pairs()
    runs = [evaluate_dataset(pairs, cfg, workers=w).to_json() for w in (1, 1, 4)]
    assert runs[0] == runs[1] == runs[2]
    for section in [*runs[0]["rows"], runs[0]["average"]]:
        for key, v in section.items():
            if isinstance(v, dict):
                assert 0.0 <= v["ci_low"] <= v["ci_high"] <= 1.0, key

    # two slides, one right and one wrong: resample means follow 1/4, 1/2, 1/4
    idx = resample_indices(cfg.seed, 2, 0, cfg.iterations)
    means = idx.sum(axis=1) / 2  # slide 1 is the correct one
    for v, p in ((0.0, 0.25), (0.5, 0.5), (1.0, 0.25)):
        freq = float((means == v).mean())
        assert abs(freq - p) < 4 * (p * (1 - p) / cfg.iterations) ** 0.5
    low, high = bootstrap_ci(lambda s: sum(s) / len(s), [0, 1], cfg)
    assert (low, high) == (0.0, 1.0)
    assert bootstrap_ci(lambda s: sum(s) / len(s), [0, 1], cfg, workers=3) == (low, high)


def _tail(label, k, conf, n=100):
    return [onehot_pred(label, conf)] * k + [onehot_pred(N, conf)] * (n - k)


def _calibration_dev_set():
    return [
        # low-confidence tumor patches on a normal slide: needs confidence threshold >= 0.9
        ([onehot_pred(CC, 0.85)] * 10 + [onehot_pred(N)] * 90, N),
        # all patches at 0.92 on a tumor slide: needs confidence threshold <= 0.9
        (_tail(CC, 10, 0.92), CC),
        # tumor share exactly 5%: needs fraction threshold >= 0.05
        (_tail(PAP, 5, 1.0), N),
        # tumor share 6%: needs fraction threshold <= 0.05
        (_tail(PAP, 6, 1.0), PAP),
    ]


def test_calibration_grid_search():
    dev = _calibration_dev_set()
    grid = CalibrationGrid()
    result = calibrate(dev, grid)
    golds = [int(g) for _, g in dev]
    brute = []
    for conf, frac in product(grid.confidence_values, grid.fraction_values):
        preds = [rule_label([(int(p.label), p.confidence) for p in pool], conf, frac) for pool, _ in dev]
        brute.append((conf, frac, macro_f1_ref(golds, preds)))
    assert len(result.table) == len(brute) == 11 * 20
    for row, ref in zip(result.table, brute):
        assert row[:2] == ref[:2] and abs(row[2] - ref[2]) <= 1e-12
    perfect = [(c, f) for c, f, s in brute if s == 1.0]
    assert perfect == [(0.9, 0.05)]
    assert all(c <= 0.9 and f <= 0.05 for c, f in perfect)
    assert result.best_config == InferenceConfig(0.9, 0.05)
    assert result.objective == 1.0


def _pred(label, conf, x, y):
    probs = np.full(5, (1 - conf) / 4)
    probs[int(label)] = conf
    return PatchPrediction.from_probs((x, y), probs)


def test_visualization_determinism_and_overlap():
    pixels = np.random.default_rng(0).integers(0, 256, size=(300, 400, 3), dtype=np.uint8)
    slide = make_slide(pixels)
    preds = [_pred(PAP, 0.95, 0, 0), _pred(CC, 0.91, 100, 50)]
    first = png_bytes(render_overlay(slide, preds, Palette(), downsample_factor=2, patch_size=224))
    second = png_bytes(render_overlay(make_slide(pixels.copy()), list(preds), Palette(), 2, 224))
    assert first == second
    for order in (preds, preds[::-1]):
        out = render_overlay(slide, order, Palette(alpha=1.0), patch_size=224)
        assert tuple(out[120, 150]) == DEFAULT_COLORS[PAP]  # overlap region
        assert tuple(out[250, 300]) == DEFAULT_COLORS[CC]  # only the second patch
        assert tuple(out[10, 10]) == DEFAULT_COLORS[PAP]


def _stub_patches(n):
    colors = list(TEXTURE_COLORS.values())
    rng = np.random.default_rng(5)
    return [
        Patch(PatchCoord(i * 7, i * 3), np.clip(np.full((32, 32, 3), colors[i % 5]) + rng.integers(-5, 6, (32, 32, 3)), 0, 255).astype(np.uint8), 1.0)
        for i in range(n)
    ]


def test_external_protocol_round_trip():
    stub = [sys.executable, "-m", "renalwsi.stub_classifier"]
    patches = _stub_patches(100)
    with ExternalProcessClassifier(stub, workers=2, patch_size=32) as ext:
        remote = ext.predict(patches, workers=2)
    assert len(remote) == 100
    mismatched = sum(p.coord != q.coord for p, q in zip(remote, patches))
    assert mismatched == 0
    local = HeuristicColorClassifier().predict(patches)
    assert [p.label for p in remote] == [p.label for p in local]

    bad = stub + ["--fault", "invalid-probs", "--fault-after", "37"]
    with ExternalProcessClassifier(bad, patch_size=32) as ext:
        with pytest.raises(ProtocolError, match=r"x=259, y=111"):
            ext.predict(patches)
