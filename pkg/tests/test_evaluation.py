import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pairwise_auc
from renalwsi.evaluation import (
    BootstrapConfig,
    UndefinedAUCError,
    bootstrap_ci,
    confusion,
    evaluate_dataset,
    macro_f1,
    per_class_metrics,
    resample_indices,
    roc_auc,
    roc_curve,
    roc_rows,
    splitmix64,
)
from renalwsi.inference import InferenceConfig, SlideDecision
from renalwsi.labels import CLASSES, ClassLabel

N, ONC, CH, CC, PAP = CLASSES


def test_splitmix64_reference_outputs():
    # sequential SplitMix64 from state 0
    assert [int(v) for v in splitmix64(0, [1, 2, 3])] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_resample_indices_are_counter_based():
    full = resample_indices(42, 7, 0, 10)
    assert full.shape == (10, 7)
    assert full.min() >= 0 and full.max() < 7
    assert np.array_equal(full[4:9], resample_indices(42, 7, 4, 9))


def test_confusion_examples():
    golds = [CC, PAP, N, N]
    cm = confusion(golds, golds)
    assert cm.classes == (N, CC, PAP)
    assert np.array_equal(cm.counts, np.diag([2, 1, 1]))
    off = confusion([CC], [PAP])
    assert off.counts.tolist() == [[0, 1], [0, 0]]
    with pytest.raises(ValueError):
        confusion([CC], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CLASSES), st.sampled_from(CLASSES)), min_size=1, max_size=80))
def test_confusion_totals(pairs):
    golds, preds = zip(*pairs)
    cm = confusion(golds, preds)
    assert cm.total == len(pairs)
    for i, c in enumerate(cm.classes):
        assert cm.counts[i].sum() == golds.count(c)


def _cm_from_counts(tp, fp, fn, tn):
    golds = [ONC] * (tp + fn) + [N] * (fp + tn)
    preds = [ONC] * tp + [N] * fn + [ONC] * fp + [N] * tn
    return confusion(golds, preds)


def test_oncocytoma_row_pattern():
    m = per_class_metrics(_cm_from_counts(8, 0, 2, 68), ONC)
    assert (m.precision, m.recall) == (1.0, 0.8)
    assert round(m.f1, 2) == 0.89 and round(m.accuracy, 2) == 0.97
    assert m.f1 == pytest.approx(16 / 18) and m.accuracy == pytest.approx(76 / 78)


def test_perfect_and_degenerate_metrics():
    cm = confusion([N, CC, PAP], [N, CC, PAP])
    for c in cm.classes:
        m = per_class_metrics(cm, c)
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1, 1, 1, 1)
    absent = per_class_metrics(cm, ONC)
    assert absent.recall == 0 and "recall" in absent.flagged and "precision" in absent.flagged


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
    assert roc_auc([0.9, 0.7, 0.7, 0.1], [True, True, False, False]) == 0.875
    assert roc_auc([0.3] * 6, [True, False] * 3) == 0.5
    with pytest.raises(UndefinedAUCError):
        roc_auc([0.1, 0.2], [True, True])


scored = st.lists(st.tuples(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), st.booleans()),
                  min_size=2, max_size=200).filter(lambda xs: 0 < sum(p for _, p in xs) < len(xs))


@settings(max_examples=150, deadline=None)
@given(scored)
def test_auc_matches_pairwise_and_is_complement_symmetric(items):
    scores, positives = zip(*items)
    auc = roc_auc(scores, positives)
    assert abs(auc - float(pairwise_auc(scores, positives))) <= 1e-12
    assert auc + roc_auc(scores, [not p for p in positives]) == 1.0


def test_roc_curve_endpoints():
    thr, fpr, tpr = roc_curve([0.9, 0.7, 0.7, 0.1], [True, True, False, False])
    assert thr[0] == np.inf
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(0.875)


def test_bootstrap_constant_metric():
    assert bootstrap_ci(lambda s: 0.42, [1, 2, 3], BootstrapConfig(200, seed=1)) == (0.42, 0.42)


def test_bootstrap_two_slide_exact_distribution():
    sample = [1, 0]  # correct, incorrect
    cfg = BootstrapConfig(10_000, seed=2024)
    values = []
    low, high = bootstrap_ci(lambda s: values.append(sum(s) / 2) or sum(s) / 2, sample, cfg)
    assert (low, high) == (0.0, 1.0)
    freq = {v: values.count(v) / len(values) for v in (0.0, 0.5, 1.0)}
    # resample multisets {0,0}, {0,1}, {1,1} with probabilities 1/4, 1/2, 1/4
    exact = {0.0: 0.25, 0.5: 0.5, 1.0: 0.25}
    for v, p in exact.items():
        sd = (p * (1 - p) / 10_000) ** 0.5
        assert abs(freq[v] - p) < 4 * sd
    assert sum(values.count(v) for v in exact) == 10_000


def test_bootstrap_deterministic_across_runs_and_workers():
    rng = np.random.default_rng(0)
    sample = list(rng.random(37))
    cfg = BootstrapConfig(3000, seed=99)
    a = bootstrap_ci(np.mean, sample, cfg)
    assert a == bootstrap_ci(np.mean, sample, cfg) == bootstrap_ci(np.mean, sample, cfg, workers=4)
    assert a != bootstrap_ci(np.mean, sample, BootstrapConfig(3000, seed=100))


def _decision(label, fractions, sid):
    return SlideDecision(ClassLabel.parse(label), tuple(fractions), 10, 10, InferenceConfig(), sid)


def _toy_pairs(n=40, seed=5):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        gold = CLASSES[i % 5]
        fr = rng.dirichlet(np.ones(5))
        fr[int(gold)] += rng.random() * 0.5
        fr /= fr.sum()
        pred = gold if rng.random() < 0.8 else CLASSES[(i + 1) % 5]
        pairs.append((_decision(pred, fr, f"s{i}"), gold))
    return pairs


def test_evaluate_perfect_predictions():
    pairs = [(_decision(c, np.eye(5)[int(c)], f"s{i}{c}"), c) for i in range(3) for c in CLASSES]
    report = evaluate_dataset(pairs, BootstrapConfig(500, seed=0))
    for m in report.average.values():
        assert (m.value, m.ci_low, m.ci_high) == (1.0, 1.0, 1.0)
    assert report.n_slides == 15
    js = report.to_json()
    assert [r["class"] for r in js["rows"]] == [c.key for c in CLASSES]
    assert set(js["rows"][0]) == {"class", "accuracy", "precision", "recall", "f1", "auc"}


def test_evaluate_point_values_match_scalar_metrics():
    pairs = _toy_pairs()
    report = evaluate_dataset(pairs, BootstrapConfig(200, seed=3))
    golds = [g for _, g in pairs]
    preds = [d.label for d, _ in pairs]
    cm = confusion(golds, preds)
    for c, row in report.rows.items():
        m = per_class_metrics(cm, c)
        assert row["precision"].value == m.precision
        assert row["recall"].value == m.recall
        assert row["f1"].value == m.f1
        assert row["accuracy"].value == m.accuracy
        assert row["auc"].value == roc_auc([d.fraction(c) for d, _ in pairs], [g == c for g in golds])
        if m.precision + m.recall > 0:
            assert m.f1 == 2 * m.precision * m.recall / (m.precision + m.recall)
        for v in row.values():
            assert 0 <= v.ci_low <= v.ci_high <= 1
    assert report.average["f1"].value == pytest.approx(macro_f1(golds, preds))


def test_vectorised_bootstrap_matches_generic_path():
    pairs = _toy_pairs()
    cfg = BootstrapConfig(400, seed=11)
    report = evaluate_dataset(pairs, cfg)

    def recall_cc(sample):
        return per_class_metrics(confusion([g for _, g in sample], [d.label for d, _ in sample]), CC).recall

    def auc_pap(sample):
        try:
            return roc_auc([d.fraction(PAP) for d, _ in sample], [g == PAP for _, g in sample])
        except UndefinedAUCError:
            return 0.0

    def macro_prec(sample):
        cm = confusion([g for _, g in sample], [d.label for d, _ in sample])
        present = {g for _, g in sample}
        return float(np.mean([per_class_metrics(cm, c).precision for c in CLASSES if c in present]))

    assert bootstrap_ci(recall_cc, pairs, cfg) == (report.rows[CC]["recall"].ci_low, report.rows[CC]["recall"].ci_high)
    lo, hi = bootstrap_ci(auc_pap, pairs, cfg)
    assert lo == pytest.approx(report.rows[PAP]["auc"].ci_low, abs=1e-12)
    assert hi == pytest.approx(report.rows[PAP]["auc"].ci_high, abs=1e-12)
    lo, hi = bootstrap_ci(macro_prec, pairs, cfg)
    assert lo == pytest.approx(report.average["precision"].ci_low, abs=1e-12)
    assert hi == pytest.approx(report.average["precision"].ci_high, abs=1e-12)


def test_evaluate_deterministic_across_workers():
    pairs = _toy_pairs()
    cfg = BootstrapConfig(2000, seed=8)
    assert evaluate_dataset(pairs, cfg).to_json() == evaluate_dataset(pairs, cfg, workers=3).to_json()


def test_single_gold_class_flags_auc():
    pairs = [(_decision(CC, np.eye(5)[3], "a"), CC), (_decision(N, np.eye(5)[0], "b"), CC)]
    report = evaluate_dataset(pairs, BootstrapConfig(100))
    assert list(report.rows) == [CC]
    assert report.rows[CC]["auc"].flagged and report.rows[CC]["auc"].value == 0.0


def test_roc_rows_skip_single_class():
    pairs = _toy_pairs(10)
    rows = roc_rows(pairs)
    assert {r[0] for r in rows} == {c.key for c in CLASSES}
    assert all(0 <= r[2] <= 1 and 0 <= r[3] <= 1 for r in rows)
