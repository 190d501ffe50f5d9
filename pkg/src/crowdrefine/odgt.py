"""JSON-lines file formats: ODGT annotations, detection dumps, feature dumps.

ODGT: one JSON object per line, {"ID": str, "gtboxes": [{"tag": str,
"fbox": [x, y, w, h], "extra": {"ignore": 0|1}}]}. Boxes are converted to
corner format on ingest; "ignore": 1 boxes become ignore regions.

Detections: {"ID": str, "dtboxes": [{"box": [x, y, w, h], "score": float,
"tag": str}]}. Features: {"ID": str, "features": [[...], ...]} with one row
per detection of the same ID, in the same order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import GroundTruth
from .validation import check_boxes, check_scores

DEFAULT_TAG = "person"


class OdgtParseError(ValueError):
    """Malformed record; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownImageError(KeyError):
    pass


class MisalignmentError(ValueError):
    pass


@dataclass
class ImageAnnotation:
    image_id: str
    boxes: np.ndarray
    tags: list[str]
    ignore_regions: np.ndarray

    def truth(self) -> GroundTruth:
        return GroundTruth(boxes=self.boxes, ignore_regions=self.ignore_regions)


@dataclass
class ImageDetections:
    image_id: str
    boxes: np.ndarray
    scores: np.ndarray
    tags: list[str] = field(default_factory=list)


def _fbox_to_corners(fbox, line: int) -> np.ndarray:
    if not isinstance(fbox, (list, tuple)) or len(fbox) != 4:
        raise OdgtParseError(f"fbox must be [x, y, w, h], got {fbox!r}", line)
    x, y, w, h = (float(v) for v in fbox)
    if w < 0 or h < 0:
        raise OdgtParseError(f"fbox with negative size: {fbox!r}", line)
    return np.array([x, y, x + w, y + h])


def _corners_to_fbox(box: np.ndarray) -> list[float]:
    return [float(box[0]), float(box[1]),
            float(box[2] - box[0]), float(box[3] - box[1])]


def _iter_records(path):
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise OdgtParseError(f"invalid JSON ({e.msg})", lineno) from e
            if not isinstance(rec, dict) or "ID" not in rec:
                raise OdgtParseError("record must be an object with an 'ID'", lineno)
            yield lineno, rec


def read_odgt(path) -> list[ImageAnnotation]:
    out = []
    seen = set()
    for lineno, rec in _iter_records(path):
        image_id = str(rec["ID"])
        if image_id in seen:
            raise OdgtParseError(f"duplicate image ID {image_id!r}", lineno)
        seen.add(image_id)
        boxes, tags, ignores = [], [], []
        for gt in rec.get("gtboxes", []):
            if "fbox" not in gt:
                raise OdgtParseError("gtbox without 'fbox'", lineno)
            corners = _fbox_to_corners(gt["fbox"], lineno)
            ignore = int(gt.get("extra", {}).get("ignore", 0))
            if ignore:
                ignores.append(corners)
            else:
                boxes.append(corners)
                tags.append(str(gt.get("tag", DEFAULT_TAG)))
        out.append(ImageAnnotation(
            image_id=image_id,
            boxes=np.stack(boxes) if boxes else np.zeros((0, 4)),
            tags=tags,
            ignore_regions=np.stack(ignores) if ignores else np.zeros((0, 4))))
    return out


def write_odgt(path, annotations: list[ImageAnnotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ann in annotations:
            gtboxes = [{"tag": ann.tags[i] if i < len(ann.tags) else DEFAULT_TAG,
                        "fbox": _corners_to_fbox(ann.boxes[i]),
                        "extra": {"ignore": 0}}
                       for i in range(ann.boxes.shape[0])]
            gtboxes += [{"tag": "mask", "fbox": _corners_to_fbox(r),
                         "extra": {"ignore": 1}}
                        for r in ann.ignore_regions]
            fh.write(json.dumps({"ID": ann.image_id, "gtboxes": gtboxes},
                                sort_keys=True) + "\n")


def read_detections(path) -> list[ImageDetections]:
    out = []
    seen = set()
    for lineno, rec in _iter_records(path):
        image_id = str(rec["ID"])
        if image_id in seen:
            raise OdgtParseError(f"duplicate image ID {image_id!r}", lineno)
        seen.add(image_id)
        boxes, scores, tags = [], [], []
        for dt in rec.get("dtboxes", []):
            if "box" not in dt or "score" not in dt:
                raise OdgtParseError("dtbox needs 'box' and 'score'", lineno)
            boxes.append(_fbox_to_corners(dt["box"], lineno))
            score = float(dt["score"])
            if not 0.0 <= score <= 1.0:
                raise OdgtParseError(f"score outside [0, 1]: {score}", lineno)
            scores.append(score)
            tags.append(str(dt.get("tag", DEFAULT_TAG)))
        out.append(ImageDetections(
            image_id=image_id,
            boxes=np.stack(boxes) if boxes else np.zeros((0, 4)),
            scores=np.array(scores), tags=tags))
    return out


def write_detections(path, detections: list[ImageDetections]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for det in detections:
            det_boxes = check_boxes(det.boxes)
            det_scores = check_scores(det.scores, det_boxes.shape[0])
            dtboxes = [{"box": _corners_to_fbox(det_boxes[i]),
                        "score": float(det_scores[i]),
                        "tag": det.tags[i] if i < len(det.tags) else DEFAULT_TAG}
                       for i in range(det_boxes.shape[0])]
            fh.write(json.dumps({"ID": det.image_id, "dtboxes": dtboxes},
                                sort_keys=True) + "\n")


def read_features(path) -> dict[str, np.ndarray]:
    out = {}
    for lineno, rec in _iter_records(path):
        image_id = str(rec["ID"])
        if image_id in out:
            raise OdgtParseError(f"duplicate image ID {image_id!r}", lineno)
        rows = rec.get("features", [])
        try:
            arr = np.asarray(rows, dtype=np.float64)
        except ValueError as e:
            raise OdgtParseError(f"ragged feature rows ({e})", lineno) from e
        if arr.size and arr.ndim != 2:
            raise OdgtParseError("features must be a list of equal-length rows",
                                 lineno)
        out[image_id] = arr if arr.size else np.zeros((0, 0))
    return out


def write_features(path, features: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for image_id, arr in features.items():
            fh.write(json.dumps({"ID": image_id,
                                 "features": np.asarray(arr).tolist()},
                                sort_keys=True) + "\n")
