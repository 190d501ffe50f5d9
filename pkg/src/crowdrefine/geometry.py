"""Axis-aligned box arithmetic: overlap measures, neighbor search, pair encoding.

Boxes are corner-format (x1, y1, x2, y2) in continuous image coordinates.
Areas are plain products (no +1 pixel convention), so all measures are
continuous in the coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import check_box, check_boxes

# Bound applied inside the log offsets of pair_geometry.
LOG_EPS = 1e-3
# Geometric frequency base of the sinusoidal expansion.
FREQ_BASE = 1000.0
# Scalars produced by pair_geometry (dx, dy, dw, dh, iou).
PAIR_SCALARS = 5


@dataclass
class GroundTruth:
    """Per-image annotation: target boxes plus regions excluded from scoring."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    ignore_regions: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.boxes = check_boxes(self.boxes)
        self.ignore_regions = check_boxes(self.ignore_regions)


def area(box) -> float:
    b = check_box(box)
    return float((b[2] - b[0]) * (b[3] - b[1]))


def iou(a, b) -> float:
    """Intersection over union; 0 when the union has zero area."""
    a = check_box(a)
    b = check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def ioa(a, region) -> float:
    """Intersection area over the area of `a`; 0 for a degenerate `a`."""
    a = check_box(a)
    region = check_box(region)
    denom = area(a)
    if denom <= 0.0:
        return 0.0
    iw = min(a[2], region[2]) - max(a[0], region[0])
    ih = min(a[3], region[3]) - max(a[1], region[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return float(iw * ih / denom)


def giou(a, b) -> float:
    """Generalized IoU: IoU minus the hull penalty, in [-1, 1]."""
    a = check_box(a)
    b = check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    hull_w = max(a[2], b[2]) - min(a[0], b[0])
    hull_h = max(a[3], b[3]) - min(a[1], b[1])
    hull = hull_w * hull_h
    base = inter / union if union > 0.0 else 0.0
    if hull <= 0.0:
        return float(base)
    return float(base - (hull - union) / hull)


def center_inside(pred, target) -> bool:
    """True iff the center of `pred` lies within `target` (boundary inclusive)."""
    p = check_box(pred)
    t = check_box(target)
    cx = 0.5 * (p[0] + p[2])
    cy = 0.5 * (p[1] + p[3])
    return bool(t[0] <= cx <= t[2] and t[1] <= cy <= t[3])


def pairwise_iou(boxes_a, boxes_b) -> np.ndarray:
    """IoU matrix of shape (|A|, |B|); degenerate unions give 0."""
    a = check_boxes(boxes_a)
    b = check_boxes(boxes_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def pairwise_ioa(boxes, regions) -> np.ndarray:
    """IoA matrix (|boxes|, |regions|): intersection over each box's own area."""
    a = check_boxes(boxes)
    r = check_boxes(regions)
    if a.shape[0] == 0 or r.shape[0] == 0:
        return np.zeros((a.shape[0], r.shape[0]))
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    lt = np.maximum(a[:, None, :2], r[None, :, :2])
    rb = np.minimum(a[:, None, 2:], r[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    out = np.zeros_like(inter)
    np.divide(inter, area_a[:, None], out=out, where=area_a[:, None] > 0.0)
    return out


def find_neighbors(query_box, pool, threshold: float, strict: bool = False) -> np.ndarray:
    """Indices of pool boxes overlapping `query_box`, in ascending order.

    The default test is IoU >= threshold; `strict=True` switches to IoU >
    threshold (with threshold 0 this is the locality rule used for
    attention masking).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    q = check_box(query_box)
    p = check_boxes(pool)
    if p.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    ious = pairwise_iou(q[None, :], p)[0]
    mask = ious > threshold if strict else ious >= threshold
    return np.nonzero(mask)[0]


def pair_geometry(b, n) -> np.ndarray:
    """Relative geometry of neighbor `n` seen from box `b`, as 5 scalars.

    (log(|dcx|/w_b + eps), log(|dcy|/h_b + eps), log(w_n/w_b), log(h_n/h_b),
    iou(b, n)). Both boxes must have positive area.
    """
    b = check_box(b)
    n = check_box(n)
    wb, hb = b[2] - b[0], b[3] - b[1]
    wn, hn = n[2] - n[0], n[3] - n[1]
    if wb <= 0.0 or hb <= 0.0 or wn <= 0.0 or hn <= 0.0:
        raise ValueError("pair_geometry requires boxes with positive area")
    dcx = abs(0.5 * (n[0] + n[2]) - 0.5 * (b[0] + b[2]))
    dcy = abs(0.5 * (n[1] + n[3]) - 0.5 * (b[1] + b[3]))
    return np.array([
        np.log(dcx / wb + LOG_EPS),
        np.log(dcy / hb + LOG_EPS),
        np.log(wn / wb),
        np.log(hn / hb),
        iou(b, n),
    ])


def sinusoid_expand(values: np.ndarray, dims_per_value: int) -> np.ndarray:
    """Expand each scalar into sin/cos features at geometric frequencies.

    Layout per scalar: [sin(v / f_0), ..., sin(v / f_{K-1}),
    cos(v / f_0), ..., cos(v / f_{K-1})] with f_k = FREQ_BASE**(k / K) and
    K = dims_per_value // 2. Scalars are concatenated in input order.
    """
    if dims_per_value % 2 != 0 or dims_per_value <= 0:
        raise ValueError("dims_per_value must be a positive even number")
    k = dims_per_value // 2
    freqs = FREQ_BASE ** (np.arange(k) / k)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    phases = v[:, None] / freqs[None, :]
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=1).reshape(-1)


def encode_pair(b, n, d_enc: int = 320) -> np.ndarray:
    """Deterministic sinusoidal embedding of the (b, n) pair geometry.

    d_enc must be divisible by 2 * PAIR_SCALARS; each geometry scalar gets
    d_enc / PAIR_SCALARS dimensions.
    """
    if d_enc % (2 * PAIR_SCALARS) != 0:
        raise ValueError(f"d_enc must be divisible by {2 * PAIR_SCALARS}, got {d_enc}")
    g = pair_geometry(b, n)
    return sinusoid_expand(g, d_enc // PAIR_SCALARS)
