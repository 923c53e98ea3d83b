"""Metric tests: hand-computed cases, brute-force oracles, and properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from care_lab import metrics as MET
from care_lab.errors import InputError
from care_lab.metrics import Interval, SegmentThresholds


# --- independent oracles (direct definition recomputation) -------------------


def ap_oracle(scores, positives):
    """Rank by counting dominating items instead of sorting."""
    def rank(i):
        return 1 + sum(1 for j in range(len(scores))
                       if scores[j] > scores[i]
                       or (scores[j] == scores[i] and j < i))
    pos_idx = [i for i, p in enumerate(positives) if p]
    total = 0.0
    for i in pos_idx:
        r = rank(i)
        pos_at_or_above = sum(1 for j in pos_idx if rank(j) <= r)
        total += pos_at_or_above / r
    return total / len(pos_idx)


def iou_oracle(a: Interval, b: Interval) -> float:
    lo = a.start if a.start > b.start else b.start
    hi = a.end if a.end < b.end else b.end
    if hi <= lo:
        return 0.0
    inter = hi - lo
    return inter / ((a.end - a.start) + (b.end - b.start) - inter)


# --- average precision --------------------------------------------------------


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert MET.average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_single_positive_last(self):
        n = 6
        scores = list(range(n, 0, -1))
        positives = [0] * (n - 1) + [1]
        assert MET.average_precision(scores, positives) == pytest.approx(1 / n)

    def test_hand_case_five_sixths(self):
        # positives land at sorted ranks 1 and 3: AP = (1/1 + 2/3) / 2 = 5/6
        scores = [0.9, 0.8, 0.7, 0.6, 0.5]
        positives = [1, 0, 1, 0, 0]
        assert MET.average_precision(scores, positives) == pytest.approx(5 / 6, abs=1e-15)

    def test_no_positives_is_an_error(self):
        with pytest.raises(InputError):
            MET.average_precision([0.5, 0.4], [0, 0])

    def test_ties_break_by_original_index(self):
        # equal scores: item 0 outranks item 1
        assert MET.average_precision([0.5, 0.5], [0, 1]) == pytest.approx(1 / 2)
        assert MET.average_precision([0.5, 0.5], [1, 0]) == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_oracle_on_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 10))
        scores = rng.choice([0.1, 0.25, 0.5, 0.75], size=n).tolist()
        positives = rng.integers(0, 2, size=n).tolist()
        if not any(positives):
            positives[int(rng.integers(n))] = 1
        assert MET.average_precision(scores, positives) == \
            pytest.approx(ap_oracle(scores, positives), abs=1e-12)

    @given(st.integers(0, 10_000), st.sampled_from(["affine", "exp", "arctan"]))
    @settings(max_examples=40, deadline=None)
    def test_invariant_under_strictly_monotone_transforms(self, seed, kind):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 12))
        scores = rng.normal(size=n)
        positives = rng.integers(0, 2, size=n).tolist()
        if not any(positives):
            positives[0] = 1
        transform = {"affine": lambda s: 3.0 * s + 1.0,
                     "exp": np.exp, "arctan": np.arctan}[kind]
        a = MET.average_precision(scores.tolist(), positives)
        b = MET.average_precision(transform(scores).tolist(), positives)
        assert a == pytest.approx(b, abs=1e-12)


class TestMultilabelMap:
    def test_single_perfect_class(self):
        m, _ = MET.multilabel_map([[0.9], [0.1]], [[1], [0]])
        assert m == 1.0

    def test_mean_of_two_classes(self):
        # class 0 AP 1.0; class 1 AP 0.5 (positive ranked second)
        scores = [[0.9, 0.9], [0.1, 0.8], [0.0, 0.7]]
        labels = [[1, 0], [0, 1], [0, 0]]
        m, per = MET.multilabel_map(scores, labels)
        assert per[0] == 1.0 and per[1] == pytest.approx(0.5)
        assert m == pytest.approx(0.75)

    def test_zero_positive_class_is_skipped_and_reported(self):
        scores = [[0.9, 0.5], [0.1, 0.4]]
        labels = [[1, 0], [0, 0]]
        m, per = MET.multilabel_map(scores, labels)
        assert per[1] is None and m == 1.0

    def test_empty_effective_subset(self):
        with pytest.raises(InputError):
            MET.multilabel_map([[0.9], [0.1]], [[0], [0]])

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_bruteforce_on_random_8x3(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=(8, 3))
        labels = rng.integers(0, 2, size=(8, 3))
        labels[rng.integers(8), :] = 1  # ensure every class has a positive
        m, per = MET.multilabel_map(scores, labels)
        expect = np.mean([ap_oracle(scores[:, c].tolist(), labels[:, c].tolist())
                          for c in range(3)])
        assert m == pytest.approx(expect, abs=1e-12)


class TestSegmentClasses:
    def test_basic_partition(self):
        head, middle, tail = MET.segment_classes([600, 300, 50])
        assert (head, middle, tail) == ({0}, {1}, {2})

    def test_engineered_17_29_94(self):
        counts = [501 + i for i in range(17)] + [100 + i * 10 for i in range(29)] \
            + [99 - (i % 99) for i in range(94)]
        head, middle, tail = MET.segment_classes(counts)
        assert (len(head), len(middle), len(tail)) == (17, 29, 94)

    def test_boundaries_fall_in_middle(self):
        head, middle, tail = MET.segment_classes([500, 100])
        assert middle == {0, 1} and not head and not tail

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=50))
    @settings(max_examples=60, deadline=None)
    def test_partition_is_disjoint_and_covers(self, counts):
        head, middle, tail = MET.segment_classes(counts)
        assert head | middle | tail == set(range(len(counts)))
        assert not (head & middle or head & tail or middle & tail)


intervals = st.builds(
    lambda s, l: Interval(round(s, 3), round(s, 3) + round(l, 3)),
    st.floats(0.0, 100.0, allow_nan=False),
    st.floats(0.01, 50.0, allow_nan=False))


class TestTemporalIou:
    def test_identical(self):
        assert MET.temporal_iou(Interval(1, 3), Interval(1, 3)) == 1.0

    def test_hand_case_one_third(self):
        assert MET.temporal_iou(Interval(0, 2), Interval(1, 3)) == pytest.approx(1 / 3)

    def test_disjoint(self):
        assert MET.temporal_iou(Interval(0, 1), Interval(2, 3)) == 0.0

    @given(intervals, intervals)
    @settings(max_examples=80, deadline=None)
    def test_symmetric_bounded_and_matches_oracle(self, a, b):
        v = MET.temporal_iou(a, b)
        assert v == MET.temporal_iou(b, a)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(iou_oracle(a, b), abs=1e-12)
        if v == 1.0:
            assert a.start == b.start and a.end == b.end

    def test_invalid_interval(self):
        with pytest.raises(InputError):
            Interval(3, 3)
        with pytest.raises(InputError):
            Interval(-1, 2)


class TestRecallAtN:
    def test_all_exact(self):
        gts = [Interval(0, 1), Interval(2, 5)]
        preds = [[Interval(0, 1)], [Interval(2, 5)]]
        assert MET.recall_at_n(preds, gts, n=1, mu=0.7) == 1.0

    def test_boundary_is_strict(self):
        # top-1 IoU exactly mu does not count
        assert MET.recall_at_n([[Interval(0, 1)]], [Interval(0, 2)], 1, 0.5) == 0.0

    def test_hand_case_three_of_four(self):
        gts = [Interval(0, 10)] * 4
        def with_iou(v):
            # [0, x] vs [0, 10] with x <= 10: intersection x, union 10
            return Interval(0, 10 * v)
        preds = [[with_iou(0.8)], [with_iou(0.2)], [with_iou(0.6)], [with_iou(0.9)]]
        assert MET.recall_at_n(preds, gts, n=1, mu=0.5) == pytest.approx(0.75)

    def test_monotone_in_n_and_mu(self):
        rng = np.random.default_rng(0)
        gts, preds = [], []
        for _ in range(12):
            s = rng.uniform(0, 10)
            gts.append(Interval(s, s + rng.uniform(1, 5)))
            cand = []
            for _ in range(4):
                ps = rng.uniform(0, 10)
                cand.append(Interval(ps, ps + rng.uniform(1, 5)))
            preds.append(cand)
        for mu in (0.1, 0.3, 0.5):
            values = [MET.recall_at_n(preds, gts, n, mu) for n in (1, 2, 3, 4)]
            assert values == sorted(values)
        for n in (1, 3):
            values = [MET.recall_at_n(preds, gts, n, mu)
                      for mu in (0.1, 0.3, 0.5, 0.7)]
            assert values == sorted(values, reverse=True)

    def test_invalid_n(self):
        with pytest.raises(InputError):
            MET.recall_at_n([[Interval(0, 1)]], [Interval(0, 1)], 0, 0.5)


class TestMeanIou:
    def test_exact_matches(self):
        gts = [Interval(0, 2), Interval(1, 4)]
        assert MET.mean_iou(gts, gts) == 1.0

    def test_hand_average(self):
        preds = [Interval(0, 2), Interval(1, 3)]
        gts = [Interval(1, 3), Interval(1, 3)]
        assert MET.mean_iou(preds, gts) == pytest.approx((1 / 3 + 1.0) / 2)

    @given(st.lists(st.tuples(intervals, intervals), min_size=1, max_size=10))
    @settings(max_examples=60, deadline=None)
    def test_matches_bruteforce(self, pairs):
        preds = [p for p, _ in pairs]
        gts = [g for _, g in pairs]
        expect = sum(iou_oracle(p, g) for p, g in pairs) / len(pairs)
        assert MET.mean_iou(preds, gts) == pytest.approx(expect, abs=1e-12)

    def test_empty_is_an_error(self):
        with pytest.raises(InputError):
            MET.mean_iou([], [])


def _kps(rng, spread=50.0):
    return rng.uniform(0, spread, size=(MET.POSE_KEYPOINT_COUNT, 2))


class TestPck:
    def test_perfect(self):
        rng = np.random.default_rng(0)
        gt = _kps(rng)
        vis = np.ones(MET.POSE_KEYPOINT_COUNT, dtype=bool)
        assert MET.pck(gt, gt, vis, (100, 150)) == 1.0

    def test_threshold_boundary_inclusive(self):
        gt = np.zeros((MET.POSE_KEYPOINT_COUNT, 2))
        vis = np.zeros(MET.POSE_KEYPOINT_COUNT, dtype=bool)
        vis[0] = vis[1] = True
        pred = gt.copy()
        pred[0, 0] = 10.0      # threshold = 0.05 * max(100, 200) = 10.0
        pred[1, 0] = 10.001
        assert MET.pck(pred, gt, vis, (100, 200), alpha=0.05) == pytest.approx(0.5)

    def test_all_beyond_threshold(self):
        rng = np.random.default_rng(1)
        gt = _kps(rng)
        vis = np.ones(MET.POSE_KEYPOINT_COUNT, dtype=bool)
        pred = gt + 100.0
        assert MET.pck(pred, gt, vis, (100, 150)) == 0.0

    def test_only_visible_keypoints_count(self):
        rng = np.random.default_rng(2)
        gt = _kps(rng)
        pred = gt.copy()
        vis = np.ones(MET.POSE_KEYPOINT_COUNT, dtype=bool)
        pred[3] += 500.0
        vis[3] = False   # the bad keypoint is occluded: ignored
        assert MET.pck(pred, gt, vis, (100, 150)) == 1.0

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        gt = _kps(rng)
        pred = gt + rng.normal(scale=3.0, size=gt.shape)
        vis = rng.integers(0, 2, MET.POSE_KEYPOINT_COUNT).astype(bool)
        vis[0] = True
        shift = np.array([123.4, -55.5])
        a = MET.pck(pred, gt, vis, (80, 120))
        b = MET.pck(pred + shift, gt + shift, vis, (80, 120))
        assert a == b

    def test_zero_visible_rejected(self):
        gt = np.zeros((MET.POSE_KEYPOINT_COUNT, 2))
        with pytest.raises(InputError):
            MET.pck(gt, gt, np.zeros(MET.POSE_KEYPOINT_COUNT, dtype=bool), (10, 10))

    @given(st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        gt = _kps(rng)
        pred = gt + rng.normal(scale=5.0, size=gt.shape)
        vis = rng.integers(0, 2, MET.POSE_KEYPOINT_COUNT).astype(bool)
        if not vis.any():
            vis[0] = True
        h, w = rng.uniform(20, 200, size=2)
        thr = 0.05 * (h if h > w else w)
        hits = misses = 0
        for i in range(MET.POSE_KEYPOINT_COUNT):
            if not vis[i]:
                continue
            d = ((pred[i, 0] - gt[i, 0]) ** 2 + (pred[i, 1] - gt[i, 1]) ** 2) ** 0.5
            if d <= thr:
                hits += 1
            else:
                misses += 1
        assert MET.pck(pred, gt, vis, (h, w)) == pytest.approx(
            hits / (hits + misses), abs=1e-12)


class TestAccuracy:
    def test_identical(self):
        assert MET.accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_two_thirds(self):
        assert MET.accuracy([1, 2, 3], [1, 0, 3]) == pytest.approx(2 / 3)

    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)),
                    min_size=1, max_size=20))
    @settings(max_examples=60, deadline=None)
    def test_matches_bruteforce(self, pairs):
        preds = [p for p, _ in pairs]
        gts = [g for _, g in pairs]
        expect = sum(1 for p, g in pairs if p == g) / len(pairs)
        assert MET.accuracy(preds, gts) == pytest.approx(expect, abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            MET.accuracy([], [])


class TestMetricReport:
    def test_json_is_deterministic_and_parseable(self):
        import json
        rep = MET.MetricReport("actions", {"map_overall": 0.5},
                               {"0": 0.25}, {"alpha": 0.05})
        assert rep.to_json() == rep.to_json()
        assert json.loads(rep.to_json())["scores"]["map_overall"] == 0.5

    def test_table_contains_scores(self):
        rep = MET.MetricReport("pose", {"pck": 0.75}, {}, {})
        table = rep.to_table()
        assert "pck" in table and "0.7500" in table
