"""Scikit-learn style wrapper around the progressive refinement stage.

X is a sequence of per-image (predictions, features) inputs and y the
matching ground truth, so the refiner slots into pipelines and model
selection utilities that expect the fit/predict/get_params protocol.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .geometry import GroundTruth
from .harness import train_on_scenes
from .metrics import EvalScene, jaccard_index
from .stage import Prediction, StageConfig, StageParams, run_stage
from .validation import check_boxes, check_matrix, check_scores


def _as_predictions(item) -> tuple[list[Prediction], np.ndarray]:
    """Accept (boxes, scores, features) triples or (list[Prediction], features)."""
    if len(item) == 2 and isinstance(item[0], (list, tuple)) and (
            not item[0] or isinstance(item[0][0], Prediction)):
        preds = list(item[0])
        feats = check_matrix(np.atleast_2d(item[1]), "features")
        return preds, feats
    boxes, scores, feats = item
    boxes = check_boxes(boxes)
    scores = check_scores(scores, boxes.shape[0])
    feats = check_matrix(np.atleast_2d(feats), "features")
    if feats.shape[0] != boxes.shape[0]:
        raise ValueError(f"{boxes.shape[0]} boxes but {feats.shape[0]} feature rows")
    preds = [Prediction(box=boxes[i], score=float(scores[i]), query_index=i)
             for i in range(boxes.shape[0])]
    return preds, feats


def _as_truth(item) -> GroundTruth:
    if isinstance(item, GroundTruth):
        return item
    if isinstance(item, (list, tuple)) and len(item) == 2:
        return GroundTruth(boxes=item[0], ignore_regions=item[1])
    return GroundTruth(boxes=item)


class ProgressiveRefiner(BaseEstimator):
    """Rescores low-confidence detections from the context of accepted ones.

    Parameters mirror the stage configuration; `fit` trains the relation
    extractor, embeddings, local attention and score head with the chosen
    one-to-one assignment strategy, `predict` returns refined
    (boxes, scores) per image with boxes identity-mapped.
    """

    def __init__(self, s: float = 0.7, theta: float = 0.4, d: int = 256,
                 d_enc: int = 320, heads: int = 8, embedding_slots: int = 128,
                 lambda_cls: float = 2.0, lambda_l1: float = 5.0,
                 lambda_giou: float = 2.0, negative_filter: float = 0.05,
                 ignore_ioa: float = 0.7, assignment: str = "progressive",
                 epochs: int = 4, lr: float = 0.01,
                 image_size: tuple[float, float] = (1024.0, 768.0),
                 seed: int = 0):
        self.s = s
        self.theta = theta
        self.d = d
        self.d_enc = d_enc
        self.heads = heads
        self.embedding_slots = embedding_slots
        self.lambda_cls = lambda_cls
        self.lambda_l1 = lambda_l1
        self.lambda_giou = lambda_giou
        self.negative_filter = negative_filter
        self.ignore_ioa = ignore_ioa
        self.assignment = assignment
        self.epochs = epochs
        self.lr = lr
        self.image_size = image_size
        self.seed = seed

    def _config(self) -> StageConfig:
        return StageConfig(s=self.s, theta=self.theta, d=self.d,
                           d_enc=self.d_enc, heads=self.heads,
                           lambda_cls=self.lambda_cls, lambda_l1=self.lambda_l1,
                           lambda_giou=self.lambda_giou,
                           negative_filter=self.negative_filter,
                           ignore_ioa=self.ignore_ioa,
                           embedding_slots=self.embedding_slots)

    def fit(self, X, y):
        """Train on per-image inputs X and ground truth y; returns self."""
        config = self._config()
        params = StageParams(config, seed=self.seed)
        scenes = [(*_as_predictions(x), _as_truth(t)) for x, t in zip(X, y)]
        self.loss_trace_ = train_on_scenes(
            params, config, scenes, epochs=self.epochs, lr=self.lr,
            strategy=self.assignment, image_size=self.image_size)
        self.params_ = params
        self.config_ = config
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("ProgressiveRefiner must be fitted first")

    def predict(self, X) -> list[tuple[np.ndarray, np.ndarray]]:
        """Refined (boxes, scores) per image, in input order."""
        self._check_fitted()
        out = []
        for item in X:
            preds, feats = _as_predictions(item)
            result = run_stage(preds, feats, self.config_, self.params_)
            boxes = (np.stack([p.box for p in result.predictions])
                     if result.predictions else np.zeros((0, 4)))
            scores = np.array([p.score for p in result.predictions])
            out.append((boxes, scores))
        return out

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y) -> float:
        """Jaccard index of the refined detections against y (higher is better)."""
        self._check_fitted()
        scenes = []
        for k, (refined, t) in enumerate(zip(self.predict(X), y)):
            boxes, scores = refined
            scenes.append(EvalScene(image_id=f"img_{k:06d}", boxes=boxes,
                                    scores=scores, truth=_as_truth(t)))
        return jaccard_index(scenes)
