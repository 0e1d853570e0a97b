"""Command-line entry point: ``oim <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    Detection,
    corloc,
    detections_from_scores,
    gt_as_detections,
    instance_recall,
    mean_average_precision,
)
from .io import (
    DatasetFormatError,
    coerce_config,
    ensure_dir,
    load_dataset,
    read_config,
    read_jsonl,
    save_dataset,
    write_json,
    write_jsonl,
)
from .mining import MINING_VARIANTS, MiningConfig, mine_variant, mined_boxes
from .model import load_checkpoint, predict, save_checkpoint
from .render import detections_svg, graph_svg, render_objectness_map
from .synth import CanvasTooSmallError, SynthConfig, generate, generate_split, oracle_scores
from .trainer import (
    ABLATION_MODES,
    TrainConfig,
    TrainingError,
    ablation_suite,
    detect,
    format_ablation_table,
    mine_with_model,
    train,
)
from .types import BoxF, appearance_graph_to_dict

logger = logging.getLogger("oim")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--out-dir", type=Path, default=None, help="directory for outputs and the manifest")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-image work")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = _Parser(prog="oim", description="Object instance mining for weakly supervised detection.")
    parser.add_argument("--version", action="version", version=f"oim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic JSONL dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--num-images", type=int, default=None)
    g.add_argument("--split", type=int, default=None, help="draw a held-out split with this id")

    m = sub.add_parser("mine", parents=[common], help="mine instances with given or oracle scores")
    m.add_argument("--dataset", type=Path, required=True)
    m.add_argument("--scores", choices=("dataset", "oracle"), default="dataset")
    m.add_argument("--checkpoint", type=Path, default=None, help="score proposals with a trained model")
    m.add_argument("--variant", choices=MINING_VARIANTS, default="full")
    m.add_argument("--alpha", type=float, default=5.0)
    m.add_argument("--T", type=float, default=0.5)

    t = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + trace")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--mode", choices=sorted(ABLATION_MODES), default=None)
    t.add_argument("--iterations", type=int, default=None)

    e = sub.add_parser("evaluate", parents=[common], help="compute mAP / CorLoc")
    e.add_argument("--dataset", type=Path, required=True, help="dataset with ground truth")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--detections", type=Path, help="JSONL of {image_id, class, box, score}")
    src.add_argument("--gt-as-detections", action="store_true", help="score the ground truth itself")
    e.add_argument("--train-dataset", type=Path, default=None, help="CorLoc / recall set (default: --dataset)")
    e.add_argument("--ap-mode", choices=("eleven_point", "area"), default="eleven_point")

    a = sub.add_parser("ablate", parents=[common], help="train every ablation mode over several seeds")
    a.add_argument("--dataset", type=Path, default=None, help="training set (default: synthetic)")
    a.add_argument("--test-dataset", type=Path, default=None)
    a.add_argument("--modes", default=",".join(ABLATION_MODES))
    a.add_argument("--seeds", default="0,1,2,3,4")
    a.add_argument("--iterations", type=int, default=None)

    r = sub.add_parser("render", parents=[common], help="objectness map (PGM) and overlays (SVG)")
    r.add_argument("--dataset", type=Path, required=True)
    r.add_argument("--image", type=int, default=0, help="image index")
    r.add_argument("--class", dest="class_id", type=int, required=True)
    r.add_argument("--checkpoint", type=Path, default=None, help="default: oracle scores")
    r.add_argument("--resolution", type=int, nargs=2, default=None, metavar=("W", "H"))
    return parser


def _config_values(args) -> dict:
    return read_config(args.config) if args.config else {}


def _out_dir(args) -> Path:
    return ensure_dir(args.out_dir or Path("."))


def _manifest(out: Path, command: str, config: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": config}
    if extra:
        doc.update(extra)
    write_json(doc, out / f"manifest_{command}.json")


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _snapshot(cfg: TrainConfig) -> dict:
    # the thread count never changes results, so it stays out of the manifest
    return {k: v for k, v in cfg.to_dict().items() if k != "threads"}


def _synth_config(args, values: dict) -> SynthConfig:
    cfg = coerce_config(SynthConfig, values)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "num_images", None) is not None:
        cfg = replace(cfg, num_images=args.num_images)
    return cfg


def _train_config(args, values: dict) -> TrainConfig:
    cfg = coerce_config(TrainConfig, values)
    over = {"threads": args.threads}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "iterations", None) is not None:
        over["total_iterations"] = args.iterations
    return replace(cfg, **over)


def cmd_generate(args) -> int:
    cfg = _synth_config(args, _config_values(args))
    ds = generate_split(cfg, args.split) if args.split is not None else generate(cfg)
    out_path = args.out if args.out_dir is None or args.out.is_absolute() else _out_dir(args) / args.out
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out_path)
    _manifest(out_path.parent, "generate", _jsonable(cfg.to_dict()), {"split": args.split, "output": out_path.name})
    logger.info("wrote %d images to %s", len(ds), out_path)
    return EXIT_OK


def _scores_for(args, ds):
    if getattr(args, "checkpoint", None) is not None:
        model = load_checkpoint(args.checkpoint)
        return [predict(model, ps.features) for ps in ds.images]
    if getattr(args, "scores", "oracle") == "oracle":
        return oracle_scores(ds)
    return [ps.scores for ps in ds.images]


def cmd_mine(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = MiningConfig(T=args.T, alpha=args.alpha, **{
        k: v for k, v in _config_values(args).items() if k == "include_core_in_davg"
    })
    scores = _scores_for(args, ds)
    records, mined = [], []
    for ps, s in zip(ds.images, scores):
        scored = ps.with_scores(s)
        graphs = [mine_variant(scored, c, cfg, args.variant) for c in ps.active_classes()]
        records.append({"image_id": ps.image_id, "graphs": [appearance_graph_to_dict(g) for g in graphs]})
        mined.append(mined_boxes(scored, graphs))
    out = _out_dir(args)
    write_jsonl(records, out / "mined.jsonl")
    summary = {"num_images": len(ds), "mined_instances": sum(len(m) for m in mined)}
    if ds.ground_truth is not None:
        summary["instance_recall"] = instance_recall(mined, ds.ground_truth)
    write_json(summary, out / "mining_summary.json")
    _manifest(out, "mine", {"T": cfg.T, "alpha": cfg.alpha, "variant": args.variant, "scores": args.scores})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    cfg = _train_config(args, _config_values(args))
    model, trace = train(ds, cfg)
    out = _out_dir(args)
    save_checkpoint(model, out / "checkpoint.txt")
    write_jsonl(trace.to_jsonl_records(), out / "trace.jsonl")
    _manifest(out, "train", _snapshot(cfg), {"dataset": args.dataset.name})
    if trace.records:
        last = trace.records[-1]
        logger.info("iteration %d: L_CE %.4f L_OIR %s", last.iteration, last.loss_ce, last.loss_oir)
    return EXIT_OK


def _load_detections(path) -> list[Detection]:
    return [
        Detection(r["image_id"], int(r["class"]), BoxF.from_seq(r["box"]), float(r["score"]))
        for r in read_jsonl(path)
    ]


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    if ds.ground_truth is None:
        raise DatasetFormatError(1, "evaluation needs 'gt' on every record")
    train_ds = load_dataset(args.train_dataset) if args.train_dataset else ds
    if train_ds.ground_truth is None:
        raise DatasetFormatError(1, "CorLoc set needs 'gt' on every record")
    values = _config_values(args)
    recall = None
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
        dets = detect(model, ds)
        train_dets = dets if train_ds is ds else detect(model, train_ds)
        cfg = _train_config(args, values)
        recall = instance_recall(mine_with_model(model, train_ds, cfg), train_ds.ground_truth)
    elif args.detections is not None:
        dets = _load_detections(args.detections)
        train_dets = dets
    else:
        dets = gt_as_detections(ds.ground_truth)
        train_dets = gt_as_detections(train_ds.ground_truth)
    mAP, aps = mean_average_precision(dets, ds.ground_truth, ds.num_classes, mode=args.ap_mode)
    cl, cls_corloc = corloc(train_dets, train_ds.ground_truth, train_ds.num_classes)
    report = {
        "per_class": {str(c): {"ap": aps[c], "corloc": cls_corloc.get(c)} for c in range(1, ds.num_classes + 1)},
        "mAP": mAP,
        "CorLoc": cl,
        "instance_recall": recall,
    }
    out = _out_dir(args)
    write_json(report, out / "metrics.json")
    _manifest(out, "evaluate", {"ap_mode": args.ap_mode, "dataset": args.dataset.name})
    print(json.dumps({"mAP": mAP, "CorLoc": cl, "instance_recall": recall}, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    values = _config_values(args)
    if args.dataset is not None:
        train_ds = load_dataset(args.dataset)
        test_ds = load_dataset(args.test_dataset) if args.test_dataset else train_ds
    else:
        scfg = coerce_config(SynthConfig, values)
        train_ds, test_ds = generate(scfg), generate_split(scfg, 1)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    unknown = set(modes) - set(ABLATION_MODES)
    if unknown:
        raise UsageError(f"unknown modes: {sorted(unknown)}")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    cfg = _train_config(args, values)
    report = ablation_suite(train_ds, test_ds, cfg, modes, seeds)
    out = _out_dir(args)
    write_json(report, out / "ablation.json")
    table = format_ablation_table(report)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    _manifest(out, "ablate", _snapshot(cfg), {"modes": modes, "seeds": seeds})
    print(table)
    return EXIT_OK


def cmd_render(args) -> int:
    ds = load_dataset(args.dataset)
    if not 0 <= args.image < len(ds):
        raise UsageError(f"image index {args.image} out of range 0..{len(ds) - 1}")
    ps = ds.images[args.image]
    if args.checkpoint is not None:
        scores = predict(load_checkpoint(args.checkpoint), ps.features)
    elif ds.ground_truth is not None:
        scores = oracle_scores(ds)[args.image]
    else:
        scores = ps.scores
    if not 1 <= args.class_id <= ds.num_classes:
        raise UsageError(f"class must be in 1..{ds.num_classes}")
    res = tuple(args.resolution) if args.resolution else (int(ps.width or 256), int(ps.height or 256))
    out = _out_dir(args)
    stem = f"{ps.image_id}_c{args.class_id}"
    (out / f"{stem}_objectness.pgm").write_bytes(render_objectness_map(ps, scores, args.class_id, res))
    dets = [d for d in detections_from_scores(ps, scores, classes=[args.class_id]) if d.score >= 0.05]
    gt = ds.ground_truth[args.image] if ds.ground_truth is not None else None
    (out / f"{stem}_detections.svg").write_text(detections_svg(ps, dets, gt), encoding="utf-8")
    if args.class_id in ps.active_classes():
        g = mine_variant(ps.with_scores(scores), args.class_id, MiningConfig(), "full")
        (out / f"{stem}_graphs.svg").write_text(graph_svg(ps, [g]), encoding="utf-8")
    _manifest(out, "render", {"image": args.image, "class": args.class_id, "resolution": list(res)})
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "mine": cmd_mine,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("oim: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DatasetFormatError, CanvasTooSmallError, ValueError, FileNotFoundError) as exc:
        print(f"oim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, RuntimeError, FloatingPointError) as exc:
        print(f"oim {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
