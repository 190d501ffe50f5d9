import itertools

import numpy as np
import pytest

from crowdrefine import metrics as mx
from crowdrefine.geometry import GroundTruth, iou, pairwise_iou


def scene(image_id, det_boxes, det_scores, gt_boxes, ignore=None):
    return mx.EvalScene(
        image_id=image_id,
        boxes=np.asarray(det_boxes, dtype=float).reshape(-1, 4) if len(det_boxes) else np.zeros((0, 4)),
        scores=np.asarray(det_scores, dtype=float),
        truth=GroundTruth(boxes=gt_boxes, ignore_regions=ignore or []))


def shifted(base, dx):
    b = np.asarray(base, dtype=float).copy()
    b[[0, 2]] += dx
    return b


G1 = [10.0, 10, 30, 50]
G2 = [100.0, 10, 120, 50]
G3 = [200.0, 10, 220, 50]
FAR = [500.0, 500, 520, 540]


def ap_oracle(scenes, iou_thresh=0.5):
    """Independent AP computation: greedy per-image matching, then a manual
    step-area sweep over the globally sorted detections."""
    rows = []
    total_gt = 0
    for sc in scenes:
        total_gt += sc.truth.boxes.shape[0]
        order = np.lexsort((np.arange(len(sc.scores)), -sc.scores))
        taken = set()
        for k in order:
            best_j, best_iou = None, iou_thresh
            for j in range(sc.truth.boxes.shape[0]):
                if j in taken:
                    continue
                o = iou(sc.boxes[k], sc.truth.boxes[j])
                if o >= best_iou:
                    best_j, best_iou = j, o
            if best_j is not None:
                taken.add(best_j)
            rows.append((-sc.scores[k], sc.image_id, int(np.where(order == k)[0][0]),
                         best_j is not None))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    tp = fp = 0
    ap = 0.0
    prev_recall = 0.0
    for _, _, _, is_tp in rows:
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall = tp / total_gt if total_gt else 0.0
        ap += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return ap


def max_matching_oracle(edges):
    """Exhaustive maximum bipartite matching size."""
    n, m = edges.shape
    if n > m:
        edges = edges.T
        n, m = m, n
    best = 0
    for perm in itertools.permutations(range(m), n):
        best = max(best, sum(1 for i, j in enumerate(perm) if edges[i, j]))
    return best


class TestAveragePrecision:
    def test_single_true_positive(self):
        sc = scene("a", [shifted(G1, 1)], [0.9], [G1])
        ap, _, _ = mx.average_precision([sc])
        assert ap == 1.0

    def test_no_detections(self):
        ap, curve, _ = mx.average_precision([scene("a", [], [], [G1])])
        assert ap == 0.0 and curve == []

    def test_hand_built_scene_matches_oracle(self):
        dets = [shifted(G1, 1), shifted(G1, 2), shifted(G2, 1), FAR,
                shifted(G3, 30)]
        scores = [0.95, 0.9, 0.8, 0.6, 0.5]
        sc = scene("a", dets, scores, [G1, G2, G3])
        ap, fp_tp, _ = mx.average_precision([sc])
        assert ap == pytest.approx(ap_oracle([sc]), abs=1e-12)
        # frozen value: TPs at ranks 1 and 3 of 5 -> (1/3)*1 + (1/3)*(2/3)
        assert ap == pytest.approx((1 / 3) * (1 + 2 / 3), abs=1e-12)
        assert fp_tp[-1] == (3, 2)

    def test_randomized_scenes_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            scenes = []
            for i in range(3):
                gt = [[x, 10, x + 20, 50] for x in rng.uniform(0, 400, rng.integers(1, 5))]
                dets, scores = [], []
                for g in gt:
                    if rng.uniform() < 0.8:
                        dets.append(shifted(g, rng.uniform(0, 8)))
                        scores.append(rng.uniform(0.3, 1.0))
                for _k in range(rng.integers(0, 3)):
                    x = rng.uniform(600, 900)
                    dets.append([x, 10, x + 20, 50])
                    scores.append(rng.uniform(0.05, 0.9))
                scenes.append(scene(f"img{i}", dets, scores, gt))
            ap, _, _ = mx.average_precision(scenes)
            assert ap == pytest.approx(ap_oracle(scenes), abs=1e-12)

    def test_ignored_detection_not_counted_as_fp(self):
        ignore = [[400.0, 400, 460, 460]]
        inside = [410.0, 410, 430, 430]
        clean = scene("a", [shifted(G1, 1)], [0.9], [G1])
        with_ign = scene("a", [shifted(G1, 1), inside], [0.9, 0.95], [G1],
                         ignore=ignore)
        assert mx.average_precision([with_ign])[0] == mx.average_precision([clean])[0]

    def test_image_permutation_invariance(self):
        s1 = scene("a", [shifted(G1, 1)], [0.9], [G1])
        s2 = scene("b", [shifted(G2, 25), FAR], [0.8, 0.7], [G2])
        assert mx.average_precision([s1, s2])[0] == mx.average_precision([s2, s1])[0]

    def test_low_score_detection_never_decreases_tp_curve(self):
        base = [scene("a", [shifted(G1, 1), FAR], [0.9, 0.5], [G1, G2])]
        more = [scene("a", [shifted(G1, 1), FAR, shifted(G2, 2)],
                      [0.9, 0.5, 0.1], [G1, G2])]
        _, curve_base, _ = mx.average_precision(base)
        _, curve_more, _ = mx.average_precision(more)
        for k in range(len(curve_base)):
            assert curve_more[k][1] >= curve_base[k][1]


def mr_oracle(scenes):
    """Direct re-implementation of the 9-point sampling."""
    per_image = mx._matched_scenes(scenes, 0.5, 0.7)
    total_gt = sum(r[3] for r in per_image)
    _, tp = mx._global_order(scenes, per_image)
    samples = []
    for f in np.logspace(-2, 0, 9):
        best = 1.0
        fp = 0
        tps = 0
        for flag in tp:
            if flag:
                tps += 1
            else:
                fp += 1
            if fp / len(scenes) <= f:
                best = min(best, 1.0 - tps / total_gt)
        samples.append(best)
    if any(s == 0.0 for s in samples):
        return 0.0
    return float(np.exp(np.mean(np.log(samples))))


class TestMissRate:
    def test_perfect_detector(self):
        scenes = [scene("a", [shifted(G1, 1), shifted(G2, 2)], [0.9, 0.8],
                        [G1, G2])]
        assert mx.log_average_miss_rate(scenes)[0] == 0.0

    def test_empty_detections(self):
        scenes = [scene("a", [], [], [G1])]
        assert mx.log_average_miss_rate(scenes)[0] == 1.0

    def test_mixed_scene_matches_oracle(self):
        scenes = [
            scene("a", [shifted(G1, 1), FAR], [0.9, 0.85], [G1, G2]),
            scene("b", [shifted(G2, 2), shifted(G3, 30)], [0.7, 0.6], [G2, G3]),
        ]
        got, samples = mx.log_average_miss_rate(scenes)
        assert got == pytest.approx(mr_oracle(scenes), abs=1e-12)
        assert len(samples) == 9

    def test_requires_images(self):
        with pytest.raises(ValueError):
            mx.log_average_miss_rate([])


class TestJaccardIndex:
    def test_exact_match(self):
        sc = scene("a", [G1, G2], [0.9, 0.8], [G1, G2])
        assert mx.jaccard_index([sc]) == 1.0

    def test_two_on_one_with_stray(self):
        # two detections on g1 (IoU .9/.8-ish), one stray: |M|=1 -> 1/4
        d1 = shifted(G1, 1)
        d2 = shifted(G1, 2)
        sc = scene("a", [d1, d2, FAR], [0.9, 0.8, 0.7], [G1, G2])
        assert mx.jaccard_index([sc]) == pytest.approx(0.25)

    def test_degenerate_conventions(self):
        assert mx.jaccard_index([scene("a", [], [], [])]) == 1.0
        assert mx.jaccard_index([scene("a", [], [], [G1])]) == 0.0
        assert mx.jaccard_index([scene("a", [G1], [0.9], [])]) == 0.0

    def test_cutoff_filters_detections(self):
        sc = scene("a", [G1, G2], [0.9, 0.4], [G1, G2])
        # |D|=1, |G|=2, |M|=1 -> 1 / (1 + 2 - 1)
        assert mx.jaccard_index([sc], score_cutoff=0.5) == pytest.approx(0.5)
        assert mx.jaccard_index([sc], score_cutoff=0.3) == 1.0

    def test_matching_size_equals_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(120):
            n_d, n_g = rng.integers(0, 8), rng.integers(0, 8)
            dets = []
            for _k in range(n_d):
                x, y = rng.uniform(0, 80, 2)
                dets.append([x, y, x + rng.uniform(8, 30), y + rng.uniform(8, 30)])
            gts = []
            for _k in range(n_g):
                x, y = rng.uniform(0, 80, 2)
                gts.append([x, y, x + rng.uniform(8, 30), y + rng.uniform(8, 30)])
            det_arr = np.asarray(dets).reshape(-1, 4) if dets else np.zeros((0, 4))
            gt_arr = np.asarray(gts).reshape(-1, 4) if gts else np.zeros((0, 4))
            ji = mx._scene_ji(det_arr, np.ones(n_d), gt_arr, 0.5, 0.5)
            edges = pairwise_iou(det_arr, gt_arr) > 0.5
            m = max_matching_oracle(edges) if n_d and n_g else 0
            if n_d == 0 and n_g == 0:
                assert ji == 1.0
            else:
                denom = n_d + n_g - m
                assert ji == pytest.approx(m / denom if denom else 1.0)


class TestScoreHistogram:
    def test_all_tp_single_bin(self):
        sc = scene("a", [shifted(G1, 1)], [0.95], [G1])
        rows = mx.score_histogram([sc], bins=8)
        assert rows[-1][2] == 1.0
        assert sum(r[2] + r[3] for r in rows) == pytest.approx(1.0)

    def test_ratios_sum_to_one(self):
        sc = scene("a", [shifted(G1, 1), FAR, shifted(G2, 3)], [0.95, 0.4, 0.6],
                   [G1, G2])
        rows = mx.score_histogram([sc], bins=5)
        assert sum(r[2] + r[3] for r in rows) == pytest.approx(1.0)

    def test_matches_direct_recount(self):
        dets = [shifted(G1, 1), shifted(G1, 3), FAR, shifted(G2, 2)]
        scores = [0.95, 0.55, 0.35, 0.75]
        sc = scene("a", dets, scores, [G1, G2])
        rows = mx.score_histogram([sc], bins=4)
        # manual: TP 0.95 (bin 3), TP 0.75 (bin 3), FP 0.55 (bin 2), FP 0.35 (bin 1)
        assert rows[3][2] == pytest.approx(0.5)
        assert rows[2][3] == pytest.approx(0.25)
        assert rows[1][3] == pytest.approx(0.25)

    def test_bins_validated(self):
        with pytest.raises(ValueError):
            mx.score_histogram([scene("a", [], [], [])], bins=0)


class TestErrorDecomposition:
    def test_duplicate_counted(self):
        # the second detection on G1 sits inside the recall-1.0 prefix because
        # the G2 detection ranks below it
        sc = scene("a", [shifted(G1, 0), shifted(G1, 1), shifted(G2, 2)],
                   [0.9, 0.8, 0.6], [G1, G2])
        report = mx.error_decomposition([sc], recall_target=1.0)
        assert report.duplicate == 1
        assert report.missing == 0
        assert report.false_positives() == 1

    def test_background_low_iou(self):
        sc = scene("a", [shifted(G1, 0), FAR, shifted(G2, 2)],
                   [0.9, 0.8, 0.6], [G1, G2])
        report = mx.error_decomposition([sc], recall_target=1.0)
        assert report.background == 1

    def test_localization_band(self):
        off = shifted(G1, 14)  # IoU in [0.1, 0.5)
        assert 0.1 <= iou(off, G1) < 0.5
        sc = scene("a", [shifted(G1, 0), off, shifted(G2, 2)],
                   [0.9, 0.8, 0.6], [G1, G2])
        report = mx.error_decomposition([sc], recall_target=1.0)
        assert report.localization == 1

    def test_prefix_stops_at_recall_target(self):
        # recall 1.0 is reached by the first detection, so the duplicate
        # below the cutoff is not part of the operating set
        sc = scene("a", [shifted(G1, 0), shifted(G1, 1)], [0.9, 0.8], [G1])
        report = mx.error_decomposition([sc], recall_target=1.0)
        assert report.false_positives() == 0
        assert report.score_cutoff == pytest.approx(0.9)

    def test_partition_property(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            dets, scores = [], []
            gt = [[x, 10, x + 20, 50] for x in rng.uniform(0, 400, 4)]
            for g in gt:
                for _k in range(rng.integers(0, 3)):
                    dets.append(shifted(g, rng.uniform(0, 25)))
                    scores.append(rng.uniform(0.1, 1.0))
            for _k in range(rng.integers(0, 3)):
                x = rng.uniform(600, 900)
                dets.append([x, 10, x + 20, 50])
                scores.append(rng.uniform(0.1, 1.0))
            sc = scene("a", dets, scores, gt)
            target = rng.uniform(0.3, 1.0)
            report = mx.error_decomposition([sc], recall_target=target)
            per_image = mx._matched_scenes([sc], 0.5, 0.7)
            rows = sorted((-s, k) for k, s in enumerate(per_image[0][0]))
            # recompute FP count at the cutoff prefix
            tp_flags = list(per_image[0][1])
            cum = np.cumsum([tp_flags[k] for _, k in rows]) / len(gt)
            reached = np.where(cum >= target)[0]
            cut = int(reached[0]) if reached.size else len(rows) - 1
            fp_at_cut = sum(1 for _, k in rows[: cut + 1] if not tp_flags[k])
            assert report.false_positives() == fp_at_cut

    def test_cutoff_at_requested_recall(self):
        dets = [shifted(G1, 1), shifted(G2, 2), FAR, shifted(G3, 1)]
        scores = [0.9, 0.8, 0.7, 0.6]
        sc = scene("a", dets, scores, [G1, G2, G3])
        report = mx.error_decomposition([sc], recall_target=0.66)
        assert report.recall == pytest.approx(2 / 3)
        assert report.score_cutoff == pytest.approx(0.8)


class TestPerfectDetector:
    def test_all_three_metrics(self):
        scenes = [scene("a", [G1, G2], [0.9, 0.8], [G1, G2]),
                  scene("b", [G3], [0.95], [G3])]
        summary = mx.summarize(scenes)
        assert summary["ap"] == 1.0
        assert summary["mr2"] == 0.0
        assert summary["ji"] == 1.0
        assert summary["errors"]["duplicate"] == 0
