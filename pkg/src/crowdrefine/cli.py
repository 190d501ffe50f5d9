"""Command-line interface.

Subcommands: eval, analyze, simulate, train, refine. Every command is
deterministic given identical inputs, flags and seeds; file outputs come
with a manifest carrying the config hash. Exit codes: 0 ok, 1 usage,
2 missing file, 3 parse error, 4 unknown image ID, 5 config error,
6 training divergence, 7 feature/detection misalignment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_params, restore_params, save_params
from .config import ConfigError, load_config
from .harness import TrainingDiverged, corrupt, generate_scene, train_toy
from .metrics import (EvalScene, average_precision, error_decomposition,
                      jaccard_index, log_average_miss_rate, score_histogram)
from .odgt import (ImageAnnotation, ImageDetections, MisalignmentError,
                   OdgtParseError, UnknownImageError, read_detections,
                   read_features, read_odgt, write_detections, write_features,
                   write_odgt)
from .stage import Prediction, StageConfig, StageParams, run_stage

USAGE_EXIT = 1
MISSING_FILE_EXIT = 2
PARSE_EXIT = 3
UNKNOWN_ID_EXIT = 4
CONFIG_EXIT = 5
DIVERGENCE_EXIT = 6
MISALIGNMENT_EXIT = 7

_META_KEYS = ("d", "d_enc", "heads", "embedding_slots", "s", "theta")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _args_hash(args: list[str]) -> str:
    return hashlib.sha256("\x1f".join(args).encode("utf-8")).hexdigest()


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _load_eval_inputs(gt_path, det_path):
    annotations = read_odgt(gt_path)
    detections = read_detections(det_path)
    known = {a.image_id for a in annotations}
    for det in detections:
        if det.image_id not in known:
            raise UnknownImageError(det.image_id)
    return annotations, detections


def _scenes_by_class(annotations, detections, tag_filter=None):
    """Per-class EvalScene lists; ignore regions apply to every class."""
    det_by_id = {d.image_id: d for d in detections}
    tags = set()
    for a in annotations:
        tags.update(a.tags)
    for d in detections:
        tags.update(d.tags)
    if not tags:
        tags = {"person"}
    if tag_filter is not None:
        tags = {tag_filter}
    out = {}
    for tag in sorted(tags):
        scenes = []
        for ann in annotations:
            keep_gt = [i for i, t in enumerate(ann.tags) if t == tag]
            det = det_by_id.get(ann.image_id)
            if det is not None and det.boxes.shape[0]:
                keep_dt = [i for i, t in enumerate(det.tags) if t == tag]
                boxes = det.boxes[keep_dt]
                scores = det.scores[keep_dt]
            else:
                boxes = np.zeros((0, 4))
                scores = np.zeros(0)
            truth = ImageAnnotation(ann.image_id, ann.boxes[keep_gt],
                                    [tag] * len(keep_gt),
                                    ann.ignore_regions).truth()
            scenes.append(EvalScene(image_id=ann.image_id, boxes=boxes,
                                    scores=scores, truth=truth))
        out[tag] = scenes
    return out


def _evaluate(per_class, iou_thresh, ji_cutoff, workers):
    """Macro-averaged ap/mr2/ji plus the single-class curves when unique."""
    aps, mrs, jis = [], [], []
    curves = None
    for tag, scenes in per_class.items():
        ap, fp_tp, pr = average_precision(scenes, iou_thresh, workers=workers)
        mr2, _ = log_average_miss_rate(scenes, iou_thresh, workers=workers)
        ji = jaccard_index(scenes, iou_thresh, ji_cutoff)
        aps.append(ap)
        mrs.append(mr2)
        jis.append(ji)
        if len(per_class) == 1:
            curves = (fp_tp, pr)
    return float(np.mean(aps)), float(np.mean(mrs)), float(np.mean(jis)), curves


def cmd_eval(args) -> int:
    annotations, detections = _load_eval_inputs(args.gt, args.detections)
    per_class = _scenes_by_class(annotations, detections, args.tag)
    ap, mr2, ji, curves = _evaluate(per_class, args.iou, args.ji_cutoff,
                                    args.workers)
    summary = {"ap": ap, "mr2": mr2, "ji": ji,
               "manifest": {"args_hash": _args_hash(args.raw_args),
                            "version": __version__}}
    print(json.dumps(summary, sort_keys=True))
    if args.curves:
        out = Path(args.curves)
        out.mkdir(parents=True, exist_ok=True)
        if curves is None:
            raise ConfigError("--curves requires a single-class evaluation "
                              "(use --tag to pick one)")
        fp_tp, pr = curves
        _write_csv(out / "fp_tp.csv", ["fp", "tp"], fp_tp)
        _write_csv(out / "pr.csv", ["recall", "precision"], pr)
    return 0


def cmd_analyze(args) -> int:
    try:
        bins = int(args.bins)
        if bins < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"--bins must be a positive integer, got {args.bins!r}")
    recall = float(args.recall)
    if not 0.0 < recall <= 1.0:
        raise ConfigError(f"--recall must lie in (0, 1], got {recall}")
    annotations, detections = _load_eval_inputs(args.gt, args.detections)
    per_class = _scenes_by_class(annotations, detections, args.tag)
    report = {"duplicate": 0, "localization": 0, "background": 0, "missing": 0}
    recalls = []
    hist_rows = None
    for tag, scenes in per_class.items():
        err = error_decomposition(scenes, recall_target=recall)
        for key in ("duplicate", "localization", "background", "missing"):
            report[key] += getattr(err, key)
        recalls.append(err.recall)
        if len(per_class) == 1:
            hist_rows = score_histogram(scenes, bins=bins)
    report["recall"] = float(np.mean(recalls))
    summary = {"errors": report,
               "manifest": {"args_hash": _args_hash(args.raw_args),
                            "version": __version__}}
    print(json.dumps(summary, sort_keys=True))
    if hist_rows is not None:
        _write_csv(Path(args.out), ["bin_low", "bin_high", "tp_ratio", "fp_ratio"],
                   hist_rows)
    return 0


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    annotations, detections, features = [], [], {}
    for k in range(config.simulate.num_scenes):
        seed = config.scene.seed + k
        gt = generate_scene(config.scene, seed=seed)
        preds, feats = corrupt(gt, config.corruption, seed,
                               image_size=(config.scene.image_width,
                                           config.scene.image_height))
        image_id = f"scene_{seed:06d}"
        annotations.append(ImageAnnotation(
            image_id=image_id, boxes=gt.boxes,
            tags=["person"] * gt.boxes.shape[0],
            ignore_regions=gt.ignore_regions))
        boxes = (np.stack([p.box for p in preds]) if preds else np.zeros((0, 4)))
        detections.append(ImageDetections(
            image_id=image_id, boxes=boxes,
            scores=np.array([p.score for p in preds]),
            tags=["person"] * len(preds)))
        features[image_id] = feats
    write_odgt(out / "gt.odgt", annotations)
    write_detections(out / "detections.jsonl", detections)
    write_features(out / "features.jsonl", features)
    _write_json(out / "manifest.json", {
        "config_sha256": config.sha256,
        "seed": config.scene.seed,
        "num_scenes": config.simulate.num_scenes,
        "objects_per_image": config.scene.objects_per_image,
        "overlaps_per_image": config.scene.overlaps_per_image,
        "version": __version__,
    })
    return 0


def _save_stage_checkpoint(path, params: StageParams, config: StageConfig):
    entries = {p.name: p.data for p in params.all()}
    for key in _META_KEYS:
        entries[f"meta.{key}"] = np.array([[float(getattr(config, key))]])
    save_params(path, entries)


def _load_stage_checkpoint(path, s=None, theta=None):
    loaded = load_params(path)
    meta = {}
    for key in _META_KEYS:
        name = f"meta.{key}"
        if name not in loaded:
            raise CheckpointError(f"checkpoint lacks metadata entry {name!r}")
        meta[key] = float(loaded.pop(name)[0, 0])
    config = StageConfig(
        s=float(meta["s"] if s is None else s),
        theta=float(meta["theta"] if theta is None else theta),
        d=int(meta["d"]), d_enc=int(meta["d_enc"]), heads=int(meta["heads"]),
        embedding_slots=int(meta["embedding_slots"]))
    params = StageParams(config, seed=0)
    restore_params(params.all(), loaded)
    return params, config


def cmd_train(args) -> int:
    config = load_config(args.config)
    strategy = args.strategy or config.train.strategy
    if strategy not in ("progressive", "merged"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    stage_cfg = config.stage
    params = StageParams(stage_cfg, seed=config.scene.seed)
    trained = train_toy(params, stage_cfg, config.scene, config.corruption,
                        epochs=config.train.epochs, lr=config.train.lr,
                        strategy=strategy, num_scenes=config.train.num_scenes)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    _save_stage_checkpoint(out, trained.params, stage_cfg)
    stem = out.with_suffix("")
    _write_csv(Path(f"{stem}_loss.csv"), ["step", "loss"],
               [(i, float(v)) for i, v in enumerate(trained.loss_trace)])
    _write_json(Path(f"{stem}_manifest.json"), {
        "config_sha256": config.sha256,
        "seed": config.scene.seed,
        "strategy": strategy,
        "steps": len(trained.loss_trace),
        "final_loss": float(trained.loss_trace[-1]) if trained.loss_trace else None,
        "version": __version__,
    })
    return 0


def _refine_detections(annotations, detections, features, params, config,
                       passthrough=False):
    known = {a.image_id for a in annotations}
    refined = []
    for det in detections:
        if det.image_id not in known:
            raise UnknownImageError(det.image_id)
        if passthrough:
            refined.append(det)
            continue
        feats = features.get(det.image_id)
        if feats is None:
            raise MisalignmentError(f"no features for image {det.image_id!r}")
        if feats.shape[0] != det.boxes.shape[0]:
            raise MisalignmentError(
                f"image {det.image_id!r}: {det.boxes.shape[0]} detections but "
                f"{feats.shape[0]} feature rows")
        if det.boxes.shape[0] and feats.shape[1] != config.d:
            raise MisalignmentError(
                f"image {det.image_id!r}: feature dim {feats.shape[1]} != "
                f"model dim {config.d}")
        preds = [Prediction(box=det.boxes[i], score=float(det.scores[i]),
                            query_index=i)
                 for i in range(det.boxes.shape[0])]
        out = run_stage(preds, feats, config, params)
        boxes = (np.stack([p.box for p in out.predictions])
                 if out.predictions else np.zeros((0, 4)))
        refined.append(ImageDetections(
            image_id=det.image_id, boxes=boxes,
            scores=np.array([p.score for p in out.predictions]),
            tags=det.tags))
    return refined


def cmd_refine(args) -> int:
    annotations = read_odgt(args.gt)
    detections = read_detections(args.detections)
    features = read_features(args.features)
    s_arg = args.s
    if s_arg is not None and s_arg > 1.0:
        print("warning: s > 1 clamped to 1.0", file=sys.stderr)
        s_arg = 1.0
    if args.passthrough:
        params, config = None, None
    else:
        if not args.checkpoint:
            raise ConfigError("refine needs --checkpoint unless --passthrough")
        params, config = _load_stage_checkpoint(args.checkpoint, s_arg, args.theta)

    if args.sweep:
        try:
            values = [float(v) for v in args.sweep.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--sweep expects comma-separated floats, got {args.sweep!r}")
        rows = []
        for sv in values:
            sv_c = min(sv, 1.0)
            cfg_s = replace(config, s=sv_c) if config is not None else None
            refined = _refine_detections(annotations, detections, features,
                                         params, cfg_s, args.passthrough)
            per_class = _scenes_by_class(annotations, refined, None)
            ap, mr2, ji, _ = _evaluate(per_class, 0.5, 0.5, 1)
            rows.append((sv_c, ap, mr2, ji))
        _write_csv(Path(args.out), ["s", "ap", "mr2", "ji"], rows)
        _write_refine_manifest(args)
        return 0

    refined = _refine_detections(annotations, detections, features, params,
                                 config, args.passthrough)
    write_detections(args.out, refined)
    _write_refine_manifest(args)
    return 0


def _write_refine_manifest(args) -> None:
    ckpt_hash = None
    if args.checkpoint:
        ckpt_hash = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    stem = Path(args.out).with_suffix("")
    _write_json(Path(f"{stem}_manifest.json"), {
        "args_hash": _args_hash(args.raw_args),
        "checkpoint_sha256": ckpt_hash,
        "passthrough": bool(args.passthrough),
        "version": __version__,
    })


def build_parser() -> _Parser:
    parser = _Parser(prog="crowdrefine",
                     description="Crowded-detection refinement and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="compute AP, MR^-2 and JI")
    p.add_argument("gt")
    p.add_argument("detections")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--ji-cutoff", type=float, default=0.5)
    p.add_argument("--tag", default=None, help="evaluate one class only")
    p.add_argument("--curves", default=None, help="directory for FP-TP / PR CSVs")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="error decomposition and score histogram")
    p.add_argument("gt")
    p.add_argument("detections")
    p.add_argument("--recall", default="0.9")
    p.add_argument("--bins", default="8")
    p.add_argument("--tag", default=None)
    p.add_argument("--out", default="histogram.csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="generate synthetic scenes and dumps")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the refinement stage on synthetic data")
    p.add_argument("config")
    p.add_argument("--strategy", choices=("progressive", "merged"), default=None)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="rescore detections with a trained stage")
    p.add_argument("gt")
    p.add_argument("detections")
    p.add_argument("features")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--s", type=float, default=None)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--passthrough", action="store_true",
                   help="skip rescoring; output equals input")
    p.add_argument("--sweep", default=None,
                   help="comma-separated s values; writes a summary CSV to --out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.raw_args = argv
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return MISSING_FILE_EXIT
    except (OdgtParseError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return PARSE_EXIT
    except UnknownImageError as e:
        print(f"error: detections reference unknown image ID {e}", file=sys.stderr)
        return UNKNOWN_ID_EXIT
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return CONFIG_EXIT
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return DIVERGENCE_EXIT
    except MisalignmentError as e:
        print(f"error: {e}", file=sys.stderr)
        return MISALIGNMENT_EXIT


if __name__ == "__main__":
    sys.exit(main())
