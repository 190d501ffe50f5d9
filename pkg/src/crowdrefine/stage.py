"""Progressive refinement stage for crowded detection.

Splits a detection set by confidence, builds relation features for the
low-confidence ("noisy") part from its high-confidence ("accepted")
neighbors, updates the noisy queries with learnable embeddings plus
locally-masked self-attention, and rescores them. Boxes pass through
unchanged; accepted predictions bypass the stage entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AttentionParams, Param, Tape, Tensor2
from scipy.special import expit

from .geometry import encode_pair, find_neighbors, pairwise_iou
from .validation import check_box, check_matrix


@dataclass
class Prediction:
    """One detection hypothesis: box, confidence, and its query slot."""

    box: np.ndarray
    score: float
    query_index: int

    def __post_init__(self):
        self.box = check_box(self.box)
        if not 0.0 <= self.score <= 1.0 or not np.isfinite(self.score):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass
class PredictionSplit:
    accepted: list[Prediction]
    noisy: list[Prediction]
    accepted_indices: list[int]
    noisy_indices: list[int]


@dataclass(frozen=True)
class StageConfig:
    """Thresholds, dimensions and loss weights of the refinement stage."""

    s: float = 0.7
    theta: float = 0.4
    d: int = 256
    d_enc: int = 320
    heads: int = 8
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    negative_filter: float = 0.05
    ignore_ioa: float = 0.7
    embedding_slots: int = 128

    def __post_init__(self):
        if not 0.0 < self.s <= 1.0:
            raise ValueError(f"score threshold s must be in (0, 1], got {self.s}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.d_enc % 10 != 0:
            raise ValueError(f"d_enc={self.d_enc} must be divisible by 10")


def _mlp_params(prefix: str, d_in: int, d_hidden: int, d_out: int,
                rng: np.random.Generator) -> dict[str, Param]:
    def init(fan_in, fan_out):
        return rng.normal(0.0, (2.0 / (fan_in + fan_out)) ** 0.5, (fan_in, fan_out))

    return {
        "w1": Param(f"{prefix}.w1", init(d_in, d_hidden)),
        "b1": Param(f"{prefix}.b1", np.zeros((1, d_hidden))),
        "w2": Param(f"{prefix}.w2", init(d_hidden, d_out)),
        "b2": Param(f"{prefix}.b2", np.zeros((1, d_out))),
    }


class StageParams:
    """All trainable parameters of one refinement stage."""

    def __init__(self, config: StageConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, d_enc = config.d, config.d_enc
        self.pair_net = _mlp_params("relation.pair", d_enc, d, d, rng)
        self.query_net = _mlp_params("relation.query", d, d, d, rng)
        self.fuse_w = Param("relation.fuse.w",
                            rng.normal(0.0, (1.0 / d) ** 0.5, (d, d)))
        self.fuse_b = Param("relation.fuse.b", np.zeros((1, d)))
        self.embed = Param("embed.table",
                           np.zeros((config.embedding_slots, d)))
        self.attn = AttentionParams(d, rng, prefix="lmsa")
        self.cls_w = Param("head.cls.w", rng.normal(0.0, (1.0 / d) ** 0.5, (d, 1)))
        self.cls_b = Param("head.cls.b", np.zeros((1, 1)))

    def all(self) -> list[Param]:
        return ([*self.pair_net.values(), *self.query_net.values(),
                 self.fuse_w, self.fuse_b, self.embed,
                 *self.attn.all(), self.cls_w, self.cls_b])

    def trainable(self) -> list[Param]:
        return self.all()


def select_predictions(preds: list[Prediction], s: float) -> PredictionSplit:
    """Partition by confidence: score >= s is accepted, the rest is noisy.

    Order within each part follows the input order."""
    accepted, noisy, ai, ni = [], [], [], []
    for idx, p in enumerate(preds):
        if p.score >= s:
            accepted.append(p)
            ai.append(idx)
        else:
            noisy.append(p)
            ni.append(idx)
    return PredictionSplit(accepted, noisy, ai, ni)


def _mlp(tape: Tape, x, net: dict[str, Param]) -> Tensor2:
    hidden = ad.relu(tape, ad.linear(tape, x, net["w1"], net["b1"]))
    return ad.linear(tape, hidden, net["w2"], net["b2"])


def relation_features(tape: Tape, noisy: list[Prediction], noisy_queries,
                      accepted: list[Prediction], params: StageParams,
                      config: StageConfig) -> Tensor2:
    """Per-noisy-prediction relation feature (Fig-4-style extractor).

    Encoded (noisy, accepted-neighbor) pairs go through the pair MLP and are
    max-pooled; the noisy query goes through its own MLP with gradients
    blocked at the query input; the sum is fused by a single linear layer.
    """
    q = ad._t(noisy_queries)
    if q.rows != len(noisy):
        raise ValueError(f"{len(noisy)} noisy predictions but {q.rows} query rows")
    if q.cols != config.d:
        raise ValueError(f"query dim {q.cols} != configured d {config.d}")
    accepted_boxes = (np.stack([p.box for p in accepted])
                      if accepted else np.zeros((0, 4)))
    rows = []
    for i, pred in enumerate(noisy):
        neighbors = find_neighbors(pred.box, accepted_boxes, config.theta)
        if neighbors.size:
            enc = np.stack([encode_pair(pred.box, accepted_boxes[j], config.d_enc)
                            for j in neighbors])
            pooled = ad.maxpool_rows(tape, _mlp(tape, Tensor2(enc), params.pair_net))
        else:
            pooled = Tensor2(np.zeros((1, config.d)))
        q_i = ad.detach(ad.gather_rows(tape, q, [i]))
        fq = _mlp(tape, q_i, params.query_net)
        fused = ad.linear(tape, ad.add(tape, pooled, fq),
                          params.fuse_w, params.fuse_b)
        rows.append(fused)
    if not rows:
        return Tensor2(np.zeros((0, config.d)))
    return ad.concat_rows(tape, rows)


def update_queries(tape: Tape, relation: Tensor2, noisy: list[Prediction],
                   accepted: list[Prediction], accepted_queries,
                   params: StageParams, config: StageConfig) -> Tensor2:
    """Add the learnable per-slot embedding, then run local self-attention.

    Keys/values cover the whole prediction set: the complemented noisy
    queries plus the accepted queries (read-only, gradients blocked). A
    query attends to every pool entry its box overlaps (IoU strictly > 0),
    which always includes itself.
    """
    if not noisy:
        return Tensor2(np.zeros((0, config.d)))
    slots = [p.query_index for p in noisy]
    if max(slots) >= params.embed.data.shape[0]:
        raise ValueError("query_index exceeds the embedding table size")
    emb = ad.gather_rows(tape, params.embed, slots)
    q_tilde = ad.add(tape, relation, emb)
    noisy_boxes = np.stack([p.box for p in noisy])
    if accepted:
        acc_boxes = np.stack([p.box for p in accepted])
        acc_feats = ad.detach(ad._t(accepted_queries))
        if acc_feats.rows != len(accepted):
            raise ValueError("accepted query rows misaligned with predictions")
        pool = ad.concat_rows(tape, [q_tilde, acc_feats])
        pool_boxes = np.vstack([noisy_boxes, acc_boxes])
    else:
        pool = q_tilde
        pool_boxes = noisy_boxes
    mask = pairwise_iou(noisy_boxes, pool_boxes) > 0.0
    return ad.masked_attention(tape, q_tilde, pool, pool, mask,
                               params.attn, config.heads)


def refine_heads(tape: Tape, updated: Tensor2, noisy: list[Prediction],
                 params: StageParams) -> tuple[Tensor2, list[np.ndarray]]:
    """Classification logits for the noisy set; boxes are identity-mapped."""
    logits = ad.linear(tape, updated, params.cls_w, params.cls_b)
    return logits, [p.box.copy() for p in noisy]


@dataclass
class StageOutput:
    predictions: list[Prediction]
    split: PredictionSplit
    noisy_logits: Tensor2 | None
    tape: Tape


def run_stage(preds: list[Prediction], queries, config: StageConfig,
              params: StageParams, tape: Tape | None = None) -> StageOutput:
    """Full stage pass. Accepted predictions come back untouched (same
    objects); noisy predictions come back rescored with identical boxes,
    all in the original input order."""
    tape = tape if tape is not None else Tape()
    q = check_matrix(np.atleast_2d(queries), "queries") if len(preds) else np.zeros((0, config.d))
    if q.shape[0] != len(preds):
        raise ValueError(f"{len(preds)} predictions but {q.shape[0]} query rows")
    split = select_predictions(preds, config.s)
    if not split.noisy:
        return StageOutput(list(preds), split, None, tape)
    noisy_q = Tensor2(q[split.noisy_indices]) if split.noisy_indices else Tensor2(np.zeros((0, config.d)))
    accepted_q = q[split.accepted_indices] if split.accepted_indices else np.zeros((0, config.d))
    relation = relation_features(tape, split.noisy, noisy_q, split.accepted,
                                 params, config)
    updated = update_queries(tape, relation, split.noisy, split.accepted,
                             accepted_q, params, config)
    logits, boxes = refine_heads(tape, updated, split.noisy, params)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("refinement produced non-finite logits")
    scores = expit(logits.data[:, 0])
    out: list[Prediction] = list(preds)
    for k, idx in enumerate(split.noisy_indices):
        out[idx] = Prediction(box=boxes[k], score=float(scores[k]),
                              query_index=split.noisy[k].query_index)
    return StageOutput(out, split, logits, tape)


class PriorStageParams:
    """One simplified decoding stage: global attention with a residual,
    a linear feature mix, and score/box-delta heads."""

    def __init__(self, d: int, rng: np.random.Generator, index: int = 0):
        prefix = f"prior{index}"
        self.attn = AttentionParams(d, rng, prefix=f"{prefix}.msa")
        std = (1.0 / d) ** 0.5
        self.mix_w = Param(f"{prefix}.mix.w", rng.normal(0.0, std, (d, d)))
        self.mix_b = Param(f"{prefix}.mix.b", np.zeros((1, d)))
        self.cls_w = Param(f"{prefix}.cls.w", rng.normal(0.0, std, (d, 1)))
        self.cls_b = Param(f"{prefix}.cls.b", np.zeros((1, 1)))
        self.box_w = Param(f"{prefix}.box.w", np.zeros((d, 4)))
        self.box_b = Param(f"{prefix}.box.b", np.zeros((1, 4)))

    @classmethod
    def identity(cls, d: int, seed: int = 0, index: int = 0) -> "PriorStageParams":
        """Attention contributes nothing (zero output projection), the mix is
        the identity, and the box head predicts zero deltas."""
        p = cls(d, np.random.default_rng(seed), index=index)
        p.attn.wo.value.data[:] = 0.0
        p.mix_w.value.data = np.eye(d)
        return p


def toy_prior_stages(boxes, features, stages: list[PriorStageParams],
                     heads: int = 8) -> tuple[list[Prediction], np.ndarray]:
    """Simplified stand-in for the earlier decoding stages.

    Each stage applies residual global self-attention, a linear mix, an
    additive box-delta head and a score head. Outputs are plain arrays:
    gradients never flow back out of this function.
    """
    if not stages:
        raise ValueError("at least one prior stage is required")
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    q = check_matrix(np.atleast_2d(features), "features").copy()
    scores = np.zeros(b.shape[0])
    for stage in stages:
        tape = Tape()
        qt = Tensor2(q)
        attended = ad.masked_attention(tape, qt, qt, qt, None, stage.attn, heads)
        mixed = ad.linear(tape, ad.add(tape, qt, attended),
                          stage.mix_w, stage.mix_b)
        deltas = ad.linear(tape, mixed, stage.box_w, stage.box_b)
        logits = ad.linear(tape, mixed, stage.cls_w, stage.cls_b)
        q = mixed.data.copy()
        b = b + deltas.data
        # keep corner ordering valid under arbitrary deltas
        b = np.concatenate([np.minimum(b[:, :2], b[:, 2:]),
                            np.maximum(b[:, :2], b[:, 2:])], axis=1)
        scores = expit(logits.data[:, 0])
    preds = [Prediction(box=b[i], score=float(scores[i]), query_index=i)
             for i in range(b.shape[0])]
    return preds, q
