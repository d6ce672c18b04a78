"""Command-line entry point: ``kdetect <subcommand> ...``.

Subcommands: ``gen-data``, ``train``, ``eval``, ``experiment`` and ``kfold``.
On failure the process exits nonzero and prints one JSON object
``{"error": ..., "message": ...}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .config import ConfigError, load_config
from .detector import load_model
from .evaluate import evaluate_detections, evaluate_model, read_predictions
from .train import freeze


def _cmd_gen_data(args) -> dict:
    path = ex.gen_data(args.kind, args.seed, args.out, args.confusion)
    return {"written": str(path)}


def _cmd_train(args) -> dict:
    cfg = load_config(args.config)
    splits = ex.load_splits(args.data)
    teacher = None
    if args.role == "student":
        if args.teacher_ckpt is not None:
            teacher = freeze(load_model(args.teacher_ckpt))
        elif cfg.train.kd_enabled:
            raise ConfigError("student training with kd enabled requires --teacher-ckpt")
    elif args.teacher_ckpt is not None:
        raise ConfigError("--teacher-ckpt only applies to --role student")
    res = ex.run_training(args.role, cfg, splits, args.out, teacher=teacher)
    out = {"model": str(Path(args.out) / "model.json"), "best_epoch": res.best_epoch,
           "best_val_map50": res.best_score}
    if teacher is not None:
        out["teacher_hash"] = teacher.param_hash()
    return out


def _cmd_eval(args) -> dict:
    if (args.ckpt is None) == (args.pred is None):
        raise ConfigError("give exactly one of --ckpt or --pred")
    cfg = load_config(args.config)
    ds = ex.load_splits(args.data)
    ds = ds[args.split] if args.split in ds else ds.get("test", next(iter(ds.values())))
    if args.ckpt is not None:
        model = load_model(args.ckpt)
        report = evaluate_model(model, ds, cfg.eval.thresholds, score_floor=cfg.train.score_floor,
                                nms_iou=cfg.train.nms_iou)
    else:
        names = tuple(args.classes.split(","))
        ids = [s.source_id for s in ds.samples]
        dets = read_predictions(args.pred, ids, names)
        report = evaluate_detections(dets, ds, names, cfg.eval.thresholds)
    out = Path(args.out)
    cfg.write(out / "config.yaml")
    ex.write_report(report, out)
    return {"report": str(out / "report.json"), **report.table_row()}


def _cmd_experiment(args) -> dict:
    cfg = load_config(args.config)
    report = ex.cmd_experiment(cfg, args.out)
    summary = {}
    for t, block in report["test_sets"].items():
        summary[t] = {"mean": block["mean"], "mean_delta": block["mean_delta"]}
    return {"comparison": str(Path(args.out) / "comparison.json"), "summary": summary}


def _cmd_kfold(args) -> dict:
    cfg = load_config(args.config)
    table = ex.cmd_kfold(cfg, args.data, args.out)
    return {"table": str(Path(args.out) / "kfold.json"), "rows": table}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdetect", description="Class-aware distillation for a grid-proposal detector.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--kind", required=True, choices=("polyp-proxy", "edd-proxy", "unseen"))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--confusion", type=float, default=0.3, help="ellipse-like neoplasia fraction")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher or a student")
    t.add_argument("--role", required=True, choices=("teacher", "student"))
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="corpus directory with train/ and val/")
    t.add_argument("--teacher-ckpt", help="teacher model.json (student role)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    e.add_argument("--ckpt")
    e.add_argument("--pred")
    e.add_argument("--classes", default="ndbe,neoplasia,polyp", help="class order for --pred")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    x = sub.add_parser("experiment", help="teacher, then kd-off and kd-on students over several seeds")
    x.add_argument("--config")
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_experiment)

    k = sub.add_parser("kfold", help="k-fold comparison of augmentation variants")
    k.add_argument("--config")
    k.add_argument("--data", help="polyp-proxy corpus directory (generated when omitted)")
    k.add_argument("--out", required=True)
    k.set_defaults(func=_cmd_kfold)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except Exception as exc:  # every failure becomes a machine-readable record
        cause = exc.__cause__ if isinstance(exc, ex.StageFailed) and exc.__cause__ else exc
        print(json.dumps({"error": type(cause).__name__, "message": str(exc), "command": args.command},
                         sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
