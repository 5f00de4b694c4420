import csv
import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from anyword.errors import EmptyDataset, ShapeMismatch
from anyword.evalharness import (
    Assignment,
    Bucket,
    EvalPair,
    EvalReport,
    StabilityThresholds,
    ap50,
    assign,
    ciou,
    class_miou,
    cross_match,
    giou,
    iou,
    miou,
    recall50,
    stability_study,
)


def mask_with(h, w, cells):
    m = np.zeros((h, w), dtype=bool)
    for r, c in cells:
        m[r, c] = True
    return m


def strip(n_on, n=8):
    """1xN masks whose IoU against ``strip(n)`` is n_on/n."""
    m = np.zeros((1, n), dtype=bool)
    m[0, :n_on] = True
    return m


# --- IoU family ----------------------------------------------------------------


def test_iou_examples(rng):
    a = rng.random((16, 16)) > 0.5
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ShapeMismatch):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_matches_cell_counts(rng):
    for _ in range(200):
        a, b = rng.random((16, 16)) < rng.random(), rng.random((16, 16)) < rng.random()
        assert iou(a, b) == oracles.iou(a.tolist(), b.tolist())


def test_ciou_examples():
    a = mask_with(2, 4, [(0, 0), (0, 1), (0, 2)])
    b = mask_with(2, 4, [(0, 1), (0, 2), (0, 3)])
    assert ciou([EvalPair(a, b)]) == iou(a, b)
    # (inter, union) = (2, 4) and (0, 4)
    p1 = EvalPair(a, b)
    p2 = EvalPair(mask_with(2, 4, [(1, 0), (1, 1)]), mask_with(2, 4, [(1, 2), (1, 3)]))
    assert ciou([p1, p2]) == 0.25
    assert ciou([EvalPair(a, a), EvalPair(b, b)]) == 1.0
    with pytest.raises(EmptyDataset):
        ciou([])


def test_giou_examples():
    half = EvalPair(strip(4), strip(8))
    full = EvalPair(strip(8), strip(8))
    assert giou([full, half]) == 0.75
    empty = np.zeros((1, 8), dtype=bool)
    assert giou([EvalPair(empty, empty)]) == 1.0
    assert giou([EvalPair(strip(1), empty)]) == 0.0
    assert giou([EvalPair(strip(1), empty), EvalPair(empty, empty)]) == 0.5
    with pytest.raises(EmptyDataset):
        giou([])


def test_eval_pair_shape_check():
    with pytest.raises(ShapeMismatch):
        EvalPair(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_pair_metrics_agree(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random((6, 6)) > 0.5, rng.random((6, 6)) > 0.5
    gt[0, 0] = True
    p = EvalPair(pred, gt)
    assert ciou([p]) == giou([p]) == iou(pred, gt)
    assert 0.0 <= iou(pred, gt) <= 1.0


def test_metrics_are_permutation_invariant(rng):
    pairs = [EvalPair(rng.random((5, 5)) > 0.5, rng.random((5, 5)) > 0.4) for _ in range(12)]
    shuffled = [pairs[i] for i in rng.permutation(len(pairs))]
    assert ciou(pairs) == ciou(shuffled)
    assert giou(pairs) == pytest.approx(giou(shuffled), abs=1e-15)


# --- matching ------------------------------------------------------------------


def test_assign_diagonal_dominant():
    assert sorted(assign(np.array([[0.9, 0.1], [0.2, 0.8]]))) == [(0, 0), (1, 1)]


def test_one_prediction_two_targets():
    gt_a, gt_b = strip(8), strip(2)
    m = cross_match([strip(7)], [("a", gt_a), ("b", gt_b)])
    assert [(p[0], p[1]) for p in m.pairs] == [(0, 0)]
    assert m.unmatched_ground_truths == [1] and m.unmatched_predictions == []


def test_empty_sides():
    m = cross_match([], [strip(3)])
    assert m.pairs == [] and m.unmatched_ground_truths == [0]
    m = cross_match([strip(3)], [])
    assert m.pairs == [] and m.unmatched_predictions == [0]


def test_assignment_matches_permutation_oracle(rng):
    for _ in range(200):
        mat = rng.random((5, 5))
        total = sum(mat[i, j] for i, j in assign(mat))
        assert total == pytest.approx(oracles.best_permutation_total(mat.tolist()), abs=1e-12)


def test_rectangular_assignment_matches_oracle(rng):
    for shape in [(2, 5), (5, 3), (1, 4)]:
        for _ in range(20):
            mat = rng.random(shape)
            total = sum(mat[i, j] for i, j in assign(mat))
            assert total == pytest.approx(oracles.best_permutation_total(mat.tolist()), abs=1e-12)


def test_optimal_dominates_greedy(rng):
    for _ in range(100):
        mat = rng.random((4, 6))
        assert sum(mat[i, j] for i, j in assign(mat)) >= oracles.greedy_total(mat.tolist()) - 1e-12


def test_cross_match_uses_mask_ious(rng):
    preds = [rng.random((8, 8)) > 0.5 for _ in range(4)]
    gts = [rng.random((8, 8)) > 0.5 for _ in range(4)]
    m = cross_match(preds, gts)
    mat = [[oracles.iou(p.tolist(), g.tolist()) for g in gts] for p in preds]
    assert m.total_iou == pytest.approx(oracles.best_permutation_total(mat), abs=1e-12)


# --- AP / recall / mIoU ---------------------------------------------------------


def test_saturated_metrics():
    gt = strip(10, 10)
    matches = [cross_match([strip(9, 10)], [gt]) for _ in range(5)]
    assert ap50(matches) == recall50(matches) == 1.0
    assert miou(matches) == pytest.approx(0.9, abs=1e-15)


def test_recall_threshold_count():
    m = Assignment([(0, 0, 0.6), (1, 1, 0.4)], [], [], [1.0, 1.0], 2, 2)
    assert recall50([m]) == 0.5


def test_empty_datasets_raise():
    for fn in (ap50, recall50, miou):
        with pytest.raises(EmptyDataset):
            fn([])


def controlled_set(rng, n_images=20):
    """Images with 1-4 targets, predictions at controlled IoUs plus stray false positives."""
    matches, detections, all_ious, n_gt = [], [], [], 0
    for _ in range(n_images):
        k = int(rng.integers(1, 5))
        gts = [np.zeros((k, 8), dtype=bool) for _ in range(k)]
        preds, scores = [], []
        for j in range(k):
            gts[j][j] = True
            if rng.random() < 0.85:
                on = int(rng.integers(1, 9))
                p = np.zeros((k, 8), dtype=bool)
                p[j, :on] = True
                preds.append(p)
                scores.append(float(rng.choice([0.3, 0.6, 0.9])))
        if rng.random() < 0.3:
            preds.append(np.zeros((k, 8), dtype=bool))
            scores.append(float(rng.choice([0.3, 0.6, 0.9])))
        m = cross_match(preds, gts, scores)
        matches.append(m)
        n_gt += k
        matched = {p[0]: p[2] for p in m.pairs}
        for i, s in enumerate(scores):
            detections.append((s, matched.get(i)))
        all_ious += [p[2] for p in m.pairs]
    return matches, detections, all_ious, n_gt


def test_metrics_match_reference_script(rng):
    for _ in range(10):
        matches, dets, ious, n_gt = controlled_set(rng)
        assert ap50(matches) == pytest.approx(oracles.ap_reference(dets, n_gt), abs=1e-12)
        assert recall50(matches) == sum(1 for v in ious if v >= 0.5) / n_gt
        assert miou(matches) == pytest.approx(sum(ious) / len(ious), abs=1e-12)


def test_ap_is_order_invariant_with_ties(rng):
    matches, *_ = controlled_set(rng)
    flipped = list(reversed(matches))
    assert ap50(matches) == ap50(flipped)


def test_ap_ranks_by_confidence():
    good, bad = strip(8), np.zeros((1, 8), dtype=bool)
    confident_hit = cross_match([good, bad], [strip(8)], [0.9, 0.1])
    confident_miss = cross_match([good, bad], [strip(8)], [0.1, 0.9])
    assert ap50([confident_hit]) == 1.0
    assert ap50([confident_miss]) == 0.5


def test_class_miou():
    a, b = strip(4), strip(8)
    val = class_miou([("sky", a, b), ("sky", b, b), ("grass", b, b)])
    assert val == pytest.approx(((4 + 8) / 16 + 1.0) / 2)


# --- stability ---------------------------------------------------------------


def test_stability_examples():
    [s] = stability_study({("img", c): 0.8 for c in range(3)})
    assert s.iou_mean == pytest.approx(0.8) and s.iou_std == pytest.approx(0.0, abs=1e-15)
    [s] = stability_study({("img", 0): 1.0, ("img", 1): 0.0})
    assert (s.iou_mean, s.iou_std, s.bucket) == (0.5, 0.5, Bucket.HARD)


def test_single_caption_warns():
    with pytest.warns(UserWarning):
        [s] = stability_study({("img", 0): 0.7})
    assert s.iou_std == 0.0 and s.n_captions == 1


def test_stability_matches_streaming_oracle(rng):
    results = {}
    series = {}
    for img in range(100):
        vals = rng.random(int(rng.integers(2, 8))).tolist()
        series[img] = vals
        results.update({(img, c): v for c, v in enumerate(vals)})
    for row in stability_study(results):
        m2, s2 = oracles.mean_std_two_pass(series[row.image_id])
        mw, sw = oracles.welford(series[row.image_id])
        assert abs(row.iou_mean - m2) < 1e-12 and abs(row.iou_std - s2) < 1e-12
        assert abs(row.iou_mean - mw) < 1e-12 and abs(row.iou_std - sw) < 1e-12


@pytest.mark.parametrize(
    "mean,std,bucket",
    [(0.9, 0.05, Bucket.EASY), (0.75, 0.10, Bucket.EASY), (0.7, 0.05, Bucket.MEDIUM),
     (0.9, 0.2, Bucket.MEDIUM), (0.49, 0.0, Bucket.HARD), (0.9, 0.26, Bucket.HARD)],
)
def test_buckets(mean, std, bucket):
    assert StabilityThresholds().bucket(mean, std) == bucket


def test_custom_thresholds():
    strict = StabilityThresholds(easy_mean=0.95)
    assert strict.bucket(0.9, 0.0) == Bucket.MEDIUM


# --- report --------------------------------------------------------------------


def test_report_outputs():
    rows = stability_study({("a", 0): 1.0, ("a", 1): 0.5, ("b", 0): 0.2, ("b", 1): 0.4})
    rep = EvalReport("stability", miou=0.5312, per_image=rows, n_records=2)
    d = json.loads(rep.to_json())
    assert d["miou"] == 0.5312 and d["per_image"][0]["bucket"] == "medium"
    assert "miou" in rep.to_table() and "53.12" in rep.to_table()
    assert "ciou" not in rep.to_table()
    parsed = list(csv.reader(io.StringIO(rep.per_image_csv())))
    assert parsed[0] == ["image_id", "n_captions", "iou_mean", "iou_std", "bucket"]
    assert [r[0] for r in parsed[1:]] == ["a", "b"]
    assert float(parsed[1][2]) == 0.75 and float(parsed[2][3]) == pytest.approx(0.1)


def test_combinations_of_three_ious():
    # every way to split {0.3, 0.5, 0.7} between hits and misses
    for keep in itertools.product([True, False], repeat=3):
        pairs = [(i, i, v) for i, (v, k) in enumerate(zip([0.3, 0.5, 0.7], keep)) if k]
        m = Assignment(pairs, [], [], [1.0] * 3, 3, 3)
        assert recall50([m]) == sum(1 for p in pairs if p[2] >= 0.5) / 3
