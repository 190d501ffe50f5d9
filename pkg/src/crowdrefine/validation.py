"""Input validation helpers shared across the package.

All box data is corner-format (x1, y1, x2, y2) float64. Helpers return
contiguous arrays so downstream code never mutates caller data by accident.
"""

from __future__ import annotations

import numpy as np


def check_box(box) -> np.ndarray:
    """Validate a single box; returns a float64 array of shape (4,)."""
    b = np.asarray(box, dtype=np.float64).reshape(-1)
    if b.shape != (4,):
        raise ValueError(f"box must have 4 coordinates, got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError(f"box has non-finite coordinates: {b}")
    if b[2] < b[0] or b[3] < b[1]:
        raise ValueError(f"box corners out of order: {b}")
    return np.ascontiguousarray(b)


def check_boxes(boxes) -> np.ndarray:
    """Validate an (n, 4) array of boxes; n may be 0."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"boxes must have shape (n, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("boxes contain non-finite coordinates")
    if np.any(arr[:, 2] < arr[:, 0]) or np.any(arr[:, 3] < arr[:, 1]):
        bad = np.where((arr[:, 2] < arr[:, 0]) | (arr[:, 3] < arr[:, 1]))[0]
        raise ValueError(f"boxes with corners out of order at rows {bad.tolist()}")
    return np.ascontiguousarray(arr)


def check_scores(scores, n: int | None = None) -> np.ndarray:
    """Validate confidence scores in [0, 1]; optionally enforce length n."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if n is not None and s.shape[0] != n:
        raise ValueError(f"expected {n} scores, got {s.shape[0]}")
    if s.size and (not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0):
        raise ValueError("scores must be finite and within [0, 1]")
    return np.ascontiguousarray(s)


def check_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate a finite 2-D float64 matrix."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)
