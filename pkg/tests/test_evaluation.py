"""Metric oracles, fidelity measures, and segmenter behavior."""

import numpy as np
import pytest
from oracles import metrics_oracle

from o2mag.evaluation import (MetricReport, SegmenterConfig, auroc,
                              average_precision, background_fidelity, f1_max,
                              image_metrics, masked_change_ratio, pixel_metrics,
                              train_segmenter)
from o2mag.numerics import DTYPE


def test_perfect_and_inverted_separation():
    out = pixel_metrics(np.array([0.9, 0.1]), np.array([1, 0]))
    assert out == {"auroc": 1.0, "ap": 1.0, "f1max": 1.0}
    assert auroc(np.array([0.9, 0.1]), np.array([0, 1])) == 0.0


def test_frozen_hand_case():
    scores = np.array([0.8, 0.6, 0.4, 0.2])
    labels = np.array([1, 0, 1, 0])
    got = pixel_metrics(scores, labels)
    want = metrics_oracle(scores, labels)
    assert got["auroc"] == pytest.approx(0.75)
    assert got["ap"] == pytest.approx(want["ap"]) == pytest.approx(5.0 / 6.0)
    assert got["f1max"] == pytest.approx(want["f1max"]) == pytest.approx(0.8)


def test_metrics_match_enumeration_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(4, 20))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        got = pixel_metrics(scores, labels)
        want = metrics_oracle(scores, labels)
        for key in ("auroc", "ap", "f1max"):
            assert got[key] == pytest.approx(want[key], abs=1e-12), (key, trial)


def test_auroc_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores = rng.standard_normal(30)
        labels = rng.integers(0, 2, 30)
        if labels.sum() in (0, 30):
            labels[0] = 1 - labels[0]
        base = auroc(scores, labels)
        for transform in (lambda s: 3.0 * s + 7.0, np.tanh,
                          lambda s: np.exp(s / 4.0)):
            assert auroc(transform(scores), labels) == pytest.approx(base, abs=1e-12)


def test_metrics_reject_single_class():
    with pytest.raises(ValueError, match="0 negative"):
        pixel_metrics(np.array([0.4, 0.6]), np.array([1, 1]))
    with pytest.raises(ValueError, match="0 positive"):
        pixel_metrics(np.array([0.4, 0.6]), np.array([0, 0]))


def test_image_metrics_degenerate_scores_rejected():
    with pytest.raises(ValueError, match="identical"):
        image_metrics(np.array([0.5, 0.5, 0.5]), np.array([1, 0, 1]))
    out = image_metrics(np.array([0.9, 0.2, 0.7]), np.array([1, 0, 1]))
    assert out["auroc"] == 1.0


def test_f1max_dominates_every_threshold():
    rng = np.random.default_rng(2)
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[0], labels[1] = 1, 0
    best = f1_max(scores, labels)
    pos = labels.sum()
    for thr in np.unique(scores):
        pred = scores >= thr
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        f1 = 2 * tp / (2 * tp + fp + (pos - tp))
        assert best >= f1 - 1e-12


def test_random_scores_balanced_labels_near_half():
    rng = np.random.default_rng(3)
    values = []
    labels = np.array([0, 1] * 50)
    for _ in range(100):
        values.append(auroc(rng.random(100), labels))
    assert 0.45 < np.mean(values) < 0.55


def test_six_image_hand_case_vs_oracle():
    scores = np.array([0.95, 0.7, 0.7, 0.4, 0.3, 0.1])
    labels = np.array([1, 1, 0, 1, 0, 0])
    got = image_metrics(scores, labels)
    want = metrics_oracle(scores, labels)
    for key in ("auroc", "ap", "f1max"):
        assert got[key] == pytest.approx(want[key], abs=1e-12)


# ---------------------------------------------------------------------------
# background fidelity
# ---------------------------------------------------------------------------

def _mask_with_block():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[10:14, 10:14] = 1
    return mask


def test_background_fidelity_trivial_cases():
    rng = np.random.default_rng(4)
    img = rng.standard_normal((32, 32, 3)).astype(DTYPE)
    mask = _mask_with_block()
    assert background_fidelity(img, img, mask) == 0.0
    # differences confined to the dilated mask contribute nothing
    inside_only = img.copy()
    inside_only[11:13, 11:13] += 0.5
    assert background_fidelity(inside_only, img, mask) == 0.0
    offset = img.copy()
    outside = _dilated(mask) == 0
    offset[outside] += 0.1
    assert background_fidelity(offset, img, mask) == pytest.approx(0.1, abs=1e-6)


def _dilated(mask):
    from o2mag.attention_edit import dilate_mask
    return dilate_mask(mask, 3)


def test_background_fidelity_rejects_full_mask():
    img = np.zeros((32, 32, 3), dtype=DTYPE)
    with pytest.raises(ValueError):
        background_fidelity(img, img, np.ones((32, 32), dtype=np.uint8))


def test_masked_change_ratio():
    rng = np.random.default_rng(5)
    base = rng.standard_normal((32, 32, 3)).astype(DTYPE)
    mask = _mask_with_block()
    gen = base.copy()
    gen[mask == 1] += 0.6
    inside, outside = masked_change_ratio(gen, base, mask)
    assert inside == pytest.approx(0.6, abs=1e-6)
    assert outside == 0.0


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------

def _toy_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        img = rng.normal(0, 0.3, (32, 32, 3)).astype(DTYPE)
        mask = np.zeros((32, 32), dtype=np.uint8)
        y, x = rng.integers(4, 24, 2)
        mask[y:y + 6, x:x + 6] = 1
        img[mask == 1] += 1.2
        pairs.append((np.clip(img, -1, 1), mask))
    return pairs


def test_segmenter_rejects_too_few_and_degenerate():
    with pytest.raises(ValueError, match="at least 50"):
        train_segmenter(_toy_pairs(5), epochs=1, seed=0)
    blank = [(np.zeros((32, 32, 3), dtype=DTYPE), np.zeros((32, 32), dtype=np.uint8))
             for _ in range(4)]
    with pytest.raises(ValueError, match="positive"):
        train_segmenter(blank, epochs=1, seed=0, min_pairs=1)


def test_segmenter_deterministic_and_loss_decreases():
    pairs = _toy_pairs(16, seed=1)
    seg_a = train_segmenter(pairs, epochs=4, seed=3, min_pairs=1)
    seg_b = train_segmenter(pairs, epochs=4, seed=3, min_pairs=1)
    pa, pb = seg_a.params(), seg_b.params()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    losses = seg_a.train_losses
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_segmenter_overfits_tiny_set():
    """Capacity check: 10 pairs, 200 epochs, training pixel AUROC > 0.99."""
    pairs = _toy_pairs(10, seed=2)
    seg = train_segmenter(pairs, epochs=200, seed=0, min_pairs=1)
    imgs = np.stack([p[0] for p in pairs])
    masks = np.stack([p[1] for p in pairs])
    scores = seg.scores(imgs)
    assert auroc(scores.reshape(-1), masks.reshape(-1)) > 0.99


def test_metric_report_bounds():
    report = MetricReport()
    with pytest.raises(ValueError):
        report.add_row("grid", "hole", {"pixel_auroc": 1.2})
    report.add_row("grid", "hole", {"pixel_auroc": 0.9, "pixel_ap": 0.8,
                                    "pixel_f1max": 0.7, "image_auroc": 1.0,
                                    "image_ap": 1.0, "image_f1max": 1.0})
    assert report.rows[0]["class"] == "grid"
