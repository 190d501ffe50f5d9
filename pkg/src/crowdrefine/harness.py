"""Synthetic crowded-scene generation, suppression baselines, and the toy
end-to-end training/evaluation loop for the refinement stage.

Scenes are person-shaped boxes scattered on a fixed canvas. Densities follow
the crowded-benchmark statistics used throughout the package (22.64 objects
and 2.40 overlapping pairs per image by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .assignment import (assign_merged, assign_progressive,
                         filter_training_samples, set_loss)
from .geometry import GroundTruth, iou, pairwise_iou, sinusoid_expand
from .metrics import EvalScene, summarize
from .stage import Prediction, StageConfig, StageParams, run_stage

DEFAULT_OBJECTS_PER_IMAGE = 22.64
DEFAULT_OVERLAPS_PER_IMAGE = 2.40


class SceneGenerationError(RuntimeError):
    """Raised when a scene cannot be placed within the iteration cap."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass(frozen=True)
class SceneSpec:
    """Target statistics of the synthetic scenes."""

    objects_per_image: float = DEFAULT_OBJECTS_PER_IMAGE
    overlaps_per_image: float = DEFAULT_OVERLAPS_PER_IMAGE
    image_width: float = 1024.0
    image_height: float = 768.0
    seed: int = 0

    def __post_init__(self):
        if self.objects_per_image < 0 or self.overlaps_per_image < 0:
            raise ValueError("scene means must be non-negative")


@dataclass(frozen=True)
class CorruptionSpec:
    """Noise model turning ground truth into stage-input predictions.

    `score_noise` blends the sampled score distributions with their clean
    limits (primaries at 1.0, duplicates and background at 0.0), so a fully
    zeroed spec reproduces the ground truth with perfect scores."""

    jitter: float = 0.05
    duplicate_rate: float = 0.55
    dropout: float = 0.08
    background_per_image: float = 8.0
    score_noise: float = 1.0
    primary_beta: tuple[float, float] = (8.0, 2.0)
    duplicate_beta: tuple[float, float] = (3.0, 3.0)
    background_beta: tuple[float, float] = (1.2, 6.0)
    feature_dim: int = 256
    feature_noise: float = 0.1

    def __post_init__(self):
        for name in ("duplicate_rate", "dropout", "score_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.jitter < 0 or self.background_per_image < 0:
            raise ValueError("jitter and background_per_image must be >= 0")


def _sample_box(rng: np.random.Generator, width: float, height: float) -> np.ndarray:
    w = rng.uniform(28.0, 72.0)
    h = w * rng.uniform(2.2, 3.2)
    h = min(h, height - 1.0)
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _overlapping_candidate(rng: np.random.Generator, base: np.ndarray,
                           width: float, height: float) -> np.ndarray:
    """One shifted/rescaled copy of `base`, clipped to the canvas."""
    w, h = base[2] - base[0], base[3] - base[1]
    dx = rng.uniform(-0.15, 0.15) * w
    dy = rng.uniform(-0.15, 0.15) * h
    sw = rng.uniform(0.92, 1.08)
    sh = rng.uniform(0.92, 1.08)
    cx = 0.5 * (base[0] + base[2]) + dx
    cy = 0.5 * (base[1] + base[3]) + dy
    cand = np.array([cx - 0.5 * w * sw, cy - 0.5 * h * sh,
                     cx + 0.5 * w * sw, cy + 0.5 * h * sh])
    cand[0] = max(cand[0], 0.0)
    cand[1] = max(cand[1], 0.0)
    cand[2] = min(cand[2], width)
    cand[3] = min(cand[3], height)
    return cand


def generate_scene(spec: SceneSpec, seed: int | None = None,
                   max_tries: int = 2000) -> GroundTruth:
    """Draw a scene matching the spec's density statistics.

    Object count is Poisson; a calibrated fraction of boxes is deliberately
    placed to overlap an existing box (IoU > 0.5), everything else is
    rejection-sampled to avoid such overlaps.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = int(rng.poisson(spec.objects_per_image))
    if n == 0:
        return GroundTruth()
    p_overlap = 0.0
    if spec.objects_per_image > 1.0 and spec.overlaps_per_image > 0.0:
        p_overlap = min(1.0, spec.overlaps_per_image / (spec.objects_per_image - 1.0))
    boxes: list[np.ndarray] = []
    for k in range(n):
        want_overlap = bool(boxes) and rng.uniform() < p_overlap
        if want_overlap:
            # only pair up boxes that are not already part of a >0.5 pair,
            # so every success contributes exactly one overlapping pair
            stacked = np.stack(boxes)
            m = pairwise_iou(stacked, stacked)
            np.fill_diagonal(m, 0.0)
            isolated = np.where(m.max(axis=1) <= 0.5)[0]
            placed = False
            if isolated.size:
                for attempt in range(max_tries):
                    base_idx = int(isolated[rng.integers(isolated.size)])
                    base = boxes[base_idx]
                    cand = _overlapping_candidate(rng, base, spec.image_width,
                                                  spec.image_height)
                    if iou(base, cand) <= 0.5:
                        continue
                    others = [b for i, b in enumerate(boxes) if i != base_idx]
                    if not others or pairwise_iou(cand[None], np.stack(others)).max() <= 0.5:
                        boxes.append(cand)
                        placed = True
                        break
            if placed:
                continue
            # no pairable box: fall through to a plain placement
        for attempt in range(max_tries):
            cand = _sample_box(rng, spec.image_width, spec.image_height)
            if not boxes or pairwise_iou(cand[None], np.stack(boxes)).max() <= 0.5:
                boxes.append(cand)
                break
        else:
            raise SceneGenerationError("could not place a box below the "
                                       "overlap limit; density infeasible")
    return GroundTruth(boxes=np.stack(boxes))


def _box_features(box: np.ndarray, score: float, width: float, height: float,
                  dim: int) -> np.ndarray:
    """Deterministic query feature: a sinusoidal embedding of the normalized
    box geometry superposed with a confidence channel.

    Real decoder features determine both the box and the score of their
    prediction, so the toy feature carries the clipped confidence logit on a
    fixed pattern the stage can project out."""
    norm = np.array([
        0.5 * (box[0] + box[2]) / width,
        0.5 * (box[1] + box[3]) / height,
        (box[2] - box[0]) / width,
        (box[3] - box[1]) / height,
    ])
    feat = sinusoid_expand(norm, dim // 4)
    logit = np.log(np.clip(score, 1e-4, 1 - 1e-4) / (1 - np.clip(score, 1e-4, 1 - 1e-4)))
    pattern = np.where(np.arange(dim) % 2 == 0, 0.25, -0.25)
    return feat + logit * pattern


def _jittered(rng: np.random.Generator, box: np.ndarray, scale: float,
              width: float, height: float) -> np.ndarray:
    w, h = box[2] - box[0], box[3] - box[1]
    d = rng.normal(0.0, scale, 4) * np.array([w, h, w, h])
    out = box + d
    out[0] = min(max(out[0], 0.0), width - 1.0)
    out[1] = min(max(out[1], 0.0), height - 1.0)
    out[2] = min(max(out[2], out[0] + 1.0), width)
    out[3] = min(max(out[3], out[1] + 1.0), height)
    return out


def corrupt(gt: GroundTruth, spec: CorruptionSpec, seed: int,
            image_size: tuple[float, float] = (1024.0, 768.0)
            ) -> tuple[list[Prediction], np.ndarray]:
    """Simulate the output of the earlier decoding stages for one scene.

    Each target yields a jittered high-score copy (unless dropped) and,
    with `duplicate_rate` probability, an extra mid-score duplicate; low
    scoring background boxes are added on top. Query features are a
    sinusoidal embedding of the box, so they carry the same geometry the
    stage sees, plus Gaussian noise.
    """
    if spec.feature_dim % 8 != 0:
        raise ValueError("feature_dim must be divisible by 8")
    rng = np.random.default_rng([seed, 1])
    width, height = image_size
    sn = spec.score_noise
    boxes, scores = [], []
    for i in range(gt.boxes.shape[0]):
        b = gt.boxes[i]
        if rng.uniform() >= spec.dropout:
            boxes.append(_jittered(rng, b, spec.jitter, width, height))
            scores.append(1.0 - sn * (1.0 - rng.beta(*spec.primary_beta)))
        if rng.uniform() < spec.duplicate_rate:
            boxes.append(_jittered(rng, b, spec.jitter * 2.0, width, height))
            scores.append(sn * rng.beta(*spec.duplicate_beta))
    for _ in range(int(rng.poisson(spec.background_per_image))):
        boxes.append(_sample_box(rng, width, height))
        scores.append(sn * rng.beta(*spec.background_beta))
    order = rng.permutation(len(boxes))
    preds = []
    feats = np.zeros((len(boxes), spec.feature_dim))
    for slot, idx in enumerate(order):
        sc = float(np.clip(scores[idx], 0.0, 1.0))
        preds.append(Prediction(box=boxes[idx], score=sc, query_index=slot))
        feats[slot] = (_box_features(boxes[idx], sc, width, height,
                                     spec.feature_dim)
                       + rng.normal(0.0, spec.feature_noise, spec.feature_dim))
    return preds, feats


def nms(preds: list[Prediction], iou_thresh: float = 0.5) -> list[Prediction]:
    """Greedy score-descending suppression at IoU >= iou_thresh.

    Equal scores are ordered by box coordinates so the kept set does not
    depend on the input order."""
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].score, *preds[i].box.tolist()))
    kept: list[int] = []
    for i in order:
        if all(iou(preds[i].box, preds[j].box) < iou_thresh for j in kept):
            kept.append(i)
    return [preds[i] for i in kept]


def soft_nms(preds: list[Prediction], iou_thresh: float = 0.5,
             mode: str = "linear", score_floor: float = 1e-3) -> list[Prediction]:
    """Score-decay suppression: overlapping boxes are rescored, not removed,
    except for a final floor cutoff.

    linear mode multiplies by (1 - IoU) above the threshold; hard mode
    zeroes the score, which reproduces plain NMS after the floor cutoff.
    """
    if mode not in ("linear", "hard"):
        raise ValueError(f"unknown soft-nms mode {mode!r}")
    boxes = [p.box for p in preds]
    scores = np.array([p.score for p in preds], dtype=np.float64)
    alive = list(range(len(preds)))
    result: list[tuple[int, float]] = []
    while alive:
        top = max(alive, key=lambda i: (scores[i], [-c for c in boxes[i]]))
        alive.remove(top)
        result.append((top, float(scores[top])))
        for j in alive:
            o = iou(boxes[top], boxes[j])
            if o >= iou_thresh:
                scores[j] *= (1.0 - o) if mode == "linear" else 0.0
    out = []
    for idx, sc in sorted(result):
        if sc > score_floor:
            out.append(Prediction(box=preds[idx].box.copy(), score=sc,
                                  query_index=preds[idx].query_index))
    return out


@dataclass
class TrainedStage:
    params: StageParams
    config: StageConfig
    loss_trace: list[float] = field(default_factory=list)


def _scene_loss(tape, preds, feats, gt, config, params, strategy, image_size):
    out = run_stage(preds, feats, config, params, tape=tape)
    if out.noisy_logits is None:
        return None
    split = out.split
    refined = [out.predictions[i] for i in split.noisy_indices]
    acc_probs = [p.score for p in split.accepted]
    acc_boxes = [p.box for p in split.accepted]
    noisy_probs = [p.score for p in refined]
    noisy_boxes = [p.box for p in refined]
    assign = assign_progressive if strategy == "progressive" else assign_merged
    _, match_l = assign(acc_probs, acc_boxes, noisy_probs, noisy_boxes, gt,
                        image_size, config.lambda_cls, config.lambda_l1,
                        config.lambda_giou)
    matched = match_l.matched_predictions
    keep = filter_training_samples(noisy_probs, matched, noisy_boxes,
                                   gt.ignore_regions, config.negative_filter,
                                   config.ignore_ioa)
    return set_loss(tape, out.noisy_logits, matched, keep, config.lambda_cls)


def train_on_scenes(params: StageParams, config: StageConfig, scenes,
                    epochs: int = 1, lr: float = 0.5,
                    strategy: str = "progressive",
                    image_size: tuple[float, float] = (1024.0, 768.0)
                    ) -> list[float]:
    """Plain SGD over (predictions, features, ground truth) triples.

    Returns the per-step loss trace. Raises TrainingDiverged on a
    non-finite loss."""
    if strategy not in ("progressive", "merged"):
        raise ValueError(f"unknown assignment strategy {strategy!r}")
    trace = []
    trainable = params.trainable()
    for _ in range(epochs):
        for preds, feats, gt in scenes:
            tape = ad.Tape()
            try:
                loss = _scene_loss(tape, preds, feats, gt, config, params,
                                   strategy, image_size)
                if loss is None:
                    continue
                value = float(loss.data[0, 0])
                if not np.isfinite(value):
                    raise TrainingDiverged(f"loss became {value}")
                tape.backward(loss)
                ad.sgd_step(trainable, lr)
            except FloatingPointError as e:
                raise TrainingDiverged(str(e)) from e
            trace.append(value)
    return trace


def make_scene(spec: SceneSpec, cspec: CorruptionSpec, seed: int):
    """One (predictions, features, ground truth) triple for a given seed."""
    gt = generate_scene(spec, seed=seed)
    preds, feats = corrupt(gt, cspec, seed,
                           image_size=(spec.image_width, spec.image_height))
    return preds, feats, gt


def train_toy(params: StageParams, config: StageConfig, spec: SceneSpec,
              cspec: CorruptionSpec, epochs: int = 2, lr: float = 0.5,
              strategy: str = "progressive", num_scenes: int = 200
              ) -> TrainedStage:
    """Generate training scenes (even seeds, so held-out evaluation can use
    the odd ones) and run SGD over them."""
    scenes = [make_scene(spec, cspec, spec.seed + 2 * k)
              for k in range(num_scenes)]
    trace = train_on_scenes(params, config, scenes, epochs=epochs, lr=lr,
                            strategy=strategy,
                            image_size=(spec.image_width, spec.image_height))
    return TrainedStage(params=params, config=config, loss_trace=trace)


def _to_eval_scene(image_id: str, preds: list[Prediction],
                   gt: GroundTruth) -> EvalScene:
    boxes = np.stack([p.box for p in preds]) if preds else np.zeros((0, 4))
    scores = np.array([p.score for p in preds])
    return EvalScene(image_id=image_id, boxes=boxes, scores=scores, truth=gt)


def ab_compare(trained: TrainedStage, spec: SceneSpec, cspec: CorruptionSpec,
               num_scenes: int = 200, nms_thresh: float = 0.5,
               recall_target: float = 0.9) -> dict:
    """Evaluate raw predictions, an NMS baseline, and the refined output on
    held-out scenes (odd seeds), with the full metric suite each."""
    raw, suppressed, refined = [], [], []
    for k in range(num_scenes):
        seed = spec.seed + 2 * k + 1
        preds, feats, gt = make_scene(spec, cspec, seed)
        image_id = f"scene_{seed:06d}"
        raw.append(_to_eval_scene(image_id, preds, gt))
        suppressed.append(_to_eval_scene(image_id, nms(preds, nms_thresh), gt))
        out = run_stage(preds, feats, trained.config, trained.params)
        refined.append(_to_eval_scene(image_id, out.predictions, gt))
    return {
        "raw": summarize(raw, recall_target=recall_target),
        "nms": summarize(suppressed, recall_target=recall_target),
        "refined": summarize(refined, recall_target=recall_target),
    }
