"""Crowded-detection evaluation: AP, log-average miss rate, Jaccard index,
score histograms, and false-positive error decomposition.

Detections overlapping an ignore region (IoA above the threshold) are
removed before matching; ignore regions never count as missed targets.
All metrics are deterministic: equal scores are ordered by ascending
image id, then ascending detection index.
"""

from __future__ import annotations

from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from .assignment import hungarian
from .geometry import GroundTruth, pairwise_ioa, pairwise_iou
from .validation import check_boxes, check_scores

MR_FPPI_POINTS = 9
MR_FPPI_RANGE = (0.01, 1.0)


@dataclass
class EvalScene:
    """Detections and ground truth of one image."""

    image_id: str
    boxes: np.ndarray
    scores: np.ndarray
    truth: GroundTruth

    def __post_init__(self):
        self.boxes = check_boxes(self.boxes)
        self.scores = check_scores(self.scores, self.boxes.shape[0])


@dataclass
class ErrorReport:
    duplicate: int = 0
    localization: int = 0
    background: int = 0
    missing: int = 0
    recall: float = 0.0
    score_cutoff: float = 0.0

    def false_positives(self) -> int:
        return self.duplicate + self.localization + self.background

    def as_dict(self) -> dict:
        return {"duplicate": self.duplicate, "localization": self.localization,
                "background": self.background, "missing": self.missing,
                "recall": self.recall, "score_cutoff": self.score_cutoff}


def _match_scene(args):
    """Greedy score-descending matching for one image.

    Returns (scores, tp flags, matched-GT flags, n_gt, max-IoU per kept det,
    duplicate flags placeholder) with ignore-overlapping detections removed.
    """
    boxes, scores, gt_boxes, ignore_regions, iou_thresh, ignore_ioa = args
    order = np.lexsort((np.arange(len(scores)), -scores))
    boxes, scores = boxes[order], scores[order]
    if ignore_regions.shape[0] and boxes.shape[0]:
        keep = pairwise_ioa(boxes, ignore_regions).max(axis=1) <= ignore_ioa
        boxes, scores = boxes[keep], scores[keep]
    n_gt = gt_boxes.shape[0]
    ious = pairwise_iou(boxes, gt_boxes)
    gt_taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(boxes.shape[0], dtype=bool)
    match_of = np.full(boxes.shape[0], -1, dtype=np.intp)
    for i in range(boxes.shape[0]):
        cand = np.where(~gt_taken & (ious[i] >= iou_thresh))[0]
        if cand.size:
            j = cand[np.argmax(ious[i, cand])]
            gt_taken[j] = True
            tp[i] = True
            match_of[i] = j
    return scores, tp, gt_taken, n_gt, ious, match_of


def _matched_scenes(scenes, iou_thresh, ignore_ioa, workers=1):
    jobs = [(s.boxes, s.scores, s.truth.boxes, s.truth.ignore_regions,
             iou_thresh, ignore_ioa) for s in scenes]
    if workers > 1 and len(jobs) >= 8:
        with Pool(workers) as pool:
            return pool.map(_match_scene, jobs)
    return [_match_scene(j) for j in jobs]


def _global_order(scenes, per_image):
    """Flatten per-image results into one score-descending sequence with the
    documented tie-break (score desc, image id asc, detection index asc)."""
    rows = []
    for scene, (scores, tp, *_rest) in zip(scenes, per_image):
        for k in range(scores.shape[0]):
            rows.append((-scores[k], scene.image_id, k, bool(tp[k])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    scores = np.array([-r[0] for r in rows]) if rows else np.zeros(0)
    tp = np.array([r[3] for r in rows], dtype=bool)
    return scores, tp


def average_precision(scenes, iou_thresh: float = 0.5, ignore_ioa: float = 0.7,
                      workers: int = 1):
    """Single-threshold AP with exact step-area integration.

    Returns (ap, fp_tp_curve, pr_curve); the curves are cumulative
    (fp, tp) and (recall, precision) sampled after every detection.
    """
    per_image = _matched_scenes(scenes, iou_thresh, ignore_ioa, workers)
    total_gt = sum(r[3] for r in per_image)
    scores, tp = _global_order(scenes, per_image)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    fp_tp_curve = list(zip(cum_fp.tolist(), cum_tp.tolist()))
    if total_gt == 0 or scores.size == 0:
        return 0.0, fp_tp_curve, []
    recall = cum_tp / total_gt
    precision = cum_tp / (cum_tp + cum_fp)
    prev_r = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_r) * precision))
    pr_curve = list(zip(recall.tolist(), precision.tolist()))
    return ap, fp_tp_curve, pr_curve


def log_average_miss_rate(scenes, iou_thresh: float = 0.5,
                          ignore_ioa: float = 0.7, workers: int = 1):
    """Geometric mean of the miss rate at 9 FPPI points log-spaced in
    [0.01, 1]. At each point the best (lowest) miss rate among operating
    thresholds with FPPI below the point is taken; 1.0 where no threshold
    qualifies.
    """
    if not scenes:
        raise ValueError("log_average_miss_rate needs at least one image")
    per_image = _matched_scenes(scenes, iou_thresh, ignore_ioa, workers)
    total_gt = sum(r[3] for r in per_image)
    if total_gt == 0:
        return 0.0, []
    _, tp = _global_order(scenes, per_image)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    fppi = cum_fp / len(scenes)
    miss = 1.0 - cum_tp / total_gt
    grid = np.logspace(np.log10(MR_FPPI_RANGE[0]), np.log10(MR_FPPI_RANGE[1]),
                       MR_FPPI_POINTS)
    samples = []
    for f in grid:
        ok = np.where(fppi <= f)[0]
        samples.append(float(miss[ok].min()) if ok.size else 1.0)
    samples_arr = np.array(samples)
    if np.any(samples_arr <= 0.0):
        return 0.0, list(zip(grid.tolist(), samples))
    mr2 = float(np.exp(np.mean(np.log(samples_arr))))
    return mr2, list(zip(grid.tolist(), samples))


def _scene_ji(boxes, scores, gt_boxes, score_cutoff, iou_thresh):
    keep = scores >= score_cutoff
    d = boxes[keep]
    n_d, n_g = d.shape[0], gt_boxes.shape[0]
    if n_d == 0 and n_g == 0:
        return 1.0
    if n_d == 0 or n_g == 0:
        return 0.0
    ious = pairwise_iou(d, gt_boxes)
    cost = np.where(ious > iou_thresh, -ious, np.inf)
    matched = len(hungarian(cost).pairs)
    return matched / (n_d + n_g - matched)


def jaccard_index(scenes, iou_thresh: float = 0.5,
                  score_cutoff: float = 0.5) -> float:
    """Mean per-image Jaccard index of the maximum bipartite matching
    between cutoff-passing detections and targets (edges need IoU strictly
    above `iou_thresh`)."""
    if not scenes:
        raise ValueError("jaccard_index needs at least one image")
    vals = [_scene_ji(s.boxes, s.scores, s.truth.boxes, score_cutoff, iou_thresh)
            for s in scenes]
    return float(np.mean(vals))


def score_histogram(scenes, bins: int = 8, iou_thresh: float = 0.5,
                    ignore_ioa: float = 0.7):
    """Per-bin (tp_ratio, fp_ratio) over [0, 1]; ratios sum to 1 overall.

    Returns a list of (bin_low, bin_high, tp_ratio, fp_ratio) rows."""
    if bins < 1:
        raise ValueError("bins must be a positive count")
    per_image = _matched_scenes(scenes, iou_thresh, ignore_ioa)
    scores, tp = _global_order(scenes, per_image)
    edges = np.linspace(0.0, 1.0, bins + 1)
    total = max(scores.size, 1)
    rows = []
    for b in range(bins):
        lo, hi = edges[b], edges[b + 1]
        if b == bins - 1:
            in_bin = (scores >= lo) & (scores <= hi)
        else:
            in_bin = (scores >= lo) & (scores < hi)
        rows.append((float(lo), float(hi),
                     float(np.sum(in_bin & tp)) / total,
                     float(np.sum(in_bin & ~tp)) / total))
    return rows


def error_decomposition(scenes, recall_target: float = 0.9,
                        iou_thresh: float = 0.5,
                        ignore_ioa: float = 0.7) -> ErrorReport:
    """Classify false positives at the score cutoff where cumulative recall
    first reaches `recall_target` (clamped to the best achievable).

    duplicate: overlaps an already-matched target at IoU >= iou_thresh;
    background: overlaps no target at IoU >= 0.1; localization: the rest.
    missing counts unmatched targets at the same cutoff.
    """
    per_image = _matched_scenes(scenes, iou_thresh, ignore_ioa)
    total_gt = sum(r[3] for r in per_image)
    rows = []
    for img_idx, (scene, res) in enumerate(zip(scenes, per_image)):
        scores = res[0]
        for k in range(scores.shape[0]):
            rows.append((-scores[k], scene.image_id, k, img_idx))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    if not rows or total_gt == 0:
        return ErrorReport(missing=total_gt, recall=0.0, score_cutoff=1.0)

    tp_flags = []
    for r in rows:
        tp_flags.append(bool(per_image[r[3]][1][r[2]]))
    cum_recall = np.cumsum(tp_flags) / total_gt
    reached = np.where(cum_recall >= recall_target)[0]
    cut = int(reached[0]) if reached.size else len(rows) - 1
    cutoff_score = -rows[cut][0]

    report = ErrorReport(recall=float(cum_recall[cut]),
                         score_cutoff=float(cutoff_score))
    # rematch each image using only its detections inside the global prefix
    prefix_by_img: dict[int, list[int]] = {}
    for r in rows[: cut + 1]:
        prefix_by_img.setdefault(r[3], []).append(r[2])
    matched_total = 0
    for img_idx, res in enumerate(per_image):
        _, _, _, n_gt, ious, _ = res
        kept = sorted(prefix_by_img.get(img_idx, []))
        gt_taken = np.zeros(n_gt, dtype=bool)
        det_tp = {}
        for k in kept:
            cand = np.where(~gt_taken & (ious[k] >= iou_thresh))[0]
            if cand.size:
                j = cand[np.argmax(ious[k, cand])]
                gt_taken[j] = True
                det_tp[k] = True
            else:
                det_tp[k] = False
        matched_total += int(gt_taken.sum())
        for k in kept:
            if det_tp[k]:
                continue
            if n_gt and np.any(ious[k] >= iou_thresh):
                report.duplicate += 1
            elif n_gt and ious[k].max() >= 0.1:
                report.localization += 1
            else:
                report.background += 1
    report.missing = total_gt - matched_total
    return report


def summarize(scenes, iou_thresh: float = 0.5, ji_cutoff: float = 0.5,
              ignore_ioa: float = 0.7, recall_target: float = 0.9,
              workers: int = 1) -> dict:
    """The {ap, mr2, ji, errors{...}} summary object."""
    ap, _, _ = average_precision(scenes, iou_thresh, ignore_ioa, workers)
    mr2, _ = log_average_miss_rate(scenes, iou_thresh, ignore_ioa, workers)
    ji = jaccard_index(scenes, iou_thresh, ji_cutoff)
    errors = error_decomposition(scenes, recall_target, iou_thresh, ignore_ioa)
    return {"ap": ap, "mr2": mr2, "ji": ji, "errors": errors.as_dict()}
