"""End-to-end protocols: data generation, training runs, the kd-on/kd-off
comparison and the augmentation k-fold table.

Every stage writes its outputs under one directory together with a
``.done`` marker; rerunning skips completed stages and resumes interrupted
training from its checkpoint. Aggregate reports are rebuilt from the
per-run report files, never from in-memory numbers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

from . import synthdata as sd
from .config import ExperimentConfig
from .detector import load_model, save_model
from .evaluate import EvalReport, evaluate_model
from .plots import write_report_plots
from .train import FrozenTeacher, freeze, run_kfold, train_student, train_teacher

log = logging.getLogger(__name__)

STUDENT_CLASSES = ("ndbe", "neoplasia", "polyp")
TEACHER_CLASSES = ("polyp",)
CONFIGURATIONS = ("kd_off", "kd_on")
TEST_SETS = ("heldout", "unseen")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class StageFailed(RuntimeError):
    """A pipeline stage raised; partial outputs and a failure marker remain on disk."""


# -- data ---------------------------------------------------------------------------


def gen_data(kind: str, seed: int, out: str | Path, confusion: float = 0.3) -> Path:
    """Write one synthetic corpus in the on-disk dataset format.

    ``polyp-proxy`` and ``edd-proxy`` produce ``train/``, ``val/`` and
    ``test/`` subdirectories; ``unseen`` produces a single test split.
    """
    out = Path(out)
    if kind == "polyp-proxy":
        return sd.save_corpus(dict(zip(sd.SPLITS, sd.generate_polyp_proxy(seed))), out)
    if kind == "edd-proxy":
        return sd.save_corpus(dict(zip(sd.SPLITS, sd.generate_edd_proxy(seed, confusion))), out)
    if kind == "unseen":
        return sd.save_dataset(sd.generate_unseen_test(seed, confusion), out)
    raise ValueError(f"unknown dataset kind {kind!r}; expected polyp-proxy, edd-proxy or unseen")


def load_splits(directory: str | Path) -> dict:
    """Load a corpus directory; a bare split directory is returned as ``{"test": ...}``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    if (d / "manifest.json").exists():
        return {"test": sd.load_dataset(d)}
    splits = sd.load_corpus(d)
    if not splits:
        raise FileNotFoundError(f"{d} holds no dataset splits")
    return splits


# -- single runs ------------------------------------------------------------------


def write_report(report: EvalReport, directory: str | Path, stem: str = "report") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.json").write_text(report.to_json())
    (d / f"{stem}.csv").write_text(report.to_csv())
    write_report_plots(report, d / f"{stem}_plots")
    return d / f"{stem}.json"


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def run_training(role: str, cfg: ExperimentConfig, splits: Mapping, out: str | Path,
                 teacher: FrozenTeacher | None = None, epochs: int | None = None):
    """Train a teacher or student into ``out`` (model, checkpoint, metrics, history)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train if epochs is None else replace(cfg.train, epochs=epochs)
    cfg.write(out / "config.yaml")
    kw = dict(metrics_path=out / "metrics.jsonl", checkpoint_path=out / "checkpoint.json")
    if role == "teacher":
        res = train_teacher(splits["train"], splits["val"], tc, **kw)
    elif role == "student":
        res = train_student(splits["train"], splits["val"], teacher, tc, **kw)
    else:
        raise ValueError(f"unknown role {role!r}")
    save_model(res.model, out / "model.json")
    (out / "history.json").write_text(_dumps({"best_epoch": res.best_epoch, "best_val_map50": res.best_score,
                                              "epochs": res.history}))
    return res


def _done(path: Path) -> bool:
    return (path / ".done").exists()


def _mark(path: Path, info: dict | None = None) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / ".done").write_text(_dumps(info or {}))


# -- comparative experiment ----------------------------------------------------------


def _experiment_data(cfg: ExperimentConfig, out: Path) -> dict:
    d = cfg.data
    sources = {"polyp": d.polyp_dir, "edd": d.edd_dir, "unseen": d.unseen_dir}
    makers = {"polyp": ("polyp-proxy", d.polyp_seed), "edd": ("edd-proxy", d.edd_seed),
              "unseen": ("unseen", d.unseen_seed)}
    data = {}
    for key, src in sources.items():
        if src is None:
            target = out / "data" / key
            if not _done(target):
                gen_data(makers[key][0], makers[key][1], target, d.confusion)
                _mark(target, {"kind": makers[key][0], "seed": makers[key][1]})
            src = target
        data[key] = load_splits(src)
    return data


def cell_dir(out: Path, config_name: str, seed_index: int) -> Path:
    return Path(out) / "students" / config_name / f"seed_{seed_index}"


def cmd_experiment(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Teacher, then kd-off and kd-on students over ``cfg.experiment.seeds`` seeds.

    Each student is evaluated on the held-out edd-proxy test split and on the
    unseen set. Returns the comparative report (also written to
    ``comparison.json``).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.yaml")
    stage = "data"
    try:
        data = _experiment_data(cfg, out)

        stage = "teacher"
        tdir = out / "teacher"
        if not _done(tdir):
            tcfg = cfg if cfg.experiment.teacher_augment is None else cfg.with_augment(cfg.experiment.teacher_augment)
            res = run_training("teacher", tcfg, data["polyp"], tdir, epochs=cfg.experiment.teacher_epochs)
            _mark(tdir, {"param_hash": res.model.param_hash(), "best_epoch": res.best_epoch})
        teacher = freeze(load_model(tdir / "model.json"))
        recorded = json.loads((tdir / ".done").read_text())["param_hash"]
        if teacher.param_hash() != recorded:
            raise RuntimeError("teacher checkpoint does not match the recorded hash")

        for name in CONFIGURATIONS:
            for s in range(cfg.experiment.seeds):
                stage = f"{name}/seed_{s}"
                cdir = cell_dir(out, name, s)
                if _done(cdir):
                    continue
                cell_cfg = replace(cfg, train=replace(cfg.train, seed=cfg.train.seed + s,
                                                      kd_enabled=(name == "kd_on")))
                before = teacher.param_hash()
                res = run_training("student", cell_cfg, data["edd"], cdir, teacher=teacher,
                                   epochs=cfg.experiment.student_epochs)
                after = teacher.param_hash()
                for test_name, ds in (("heldout", data["edd"]["test"]), ("unseen", data["unseen"]["test"])):
                    rep = evaluate_model(res.model, ds, cfg.eval.thresholds, score_floor=cfg.train.score_floor,
                                         nms_iou=cfg.train.nms_iou)
                    write_report(rep, cdir, f"report_{test_name}")
                _mark(cdir, {"teacher_hash_before": before, "teacher_hash_after": after,
                             "teacher_hash_recorded": recorded, "seed": cell_cfg.train.seed,
                             "best_epoch": res.best_epoch})
                if not (before == after == recorded):
                    raise RuntimeError(f"teacher parameters changed during {stage}")

        stage = "report"
        report = comparison_from_files(out, cfg.experiment.seeds)
        (out / "comparison.json").write_text(_dumps(report))
        (out / "comparison.md").write_text(comparison_markdown(report))
        failed = out / "FAILED.json"
        if failed.exists():
            failed.unlink()
        return report
    except Exception as exc:
        (out / "FAILED.json").write_text(_dumps({"stage": stage, "error": type(exc).__name__,
                                                 "message": str(exc)}))
        raise StageFailed(f"experiment failed at stage {stage}: {exc}") from exc


def _metrics(rep: EvalReport) -> dict:
    row = rep.table_row()
    return {k: row[k] for k in row}


def comparison_from_files(out: str | Path, seeds: int) -> dict:
    """Rebuild the kd-on versus kd-off comparison from the per-cell report files."""
    out = Path(out)
    cells = {}
    for name in CONFIGURATIONS:
        for s in range(seeds):
            cdir = cell_dir(out, name, s)
            marker = json.loads((cdir / ".done").read_text())
            for t in TEST_SETS:
                rep = read_report(cdir / f"report_{t}.json")
                cells.setdefault(t, {}).setdefault(name, []).append(_metrics(rep))
            cells.setdefault("teacher_hashes", []).append(
                {"cell": f"{name}/seed_{s}", "before": marker["teacher_hash_before"],
                 "after": marker["teacher_hash_after"], "recorded": marker["teacher_hash_recorded"]})
    report = {"seeds": seeds, "configurations": list(CONFIGURATIONS), "test_sets": {},
              "teacher_hashes": cells.pop("teacher_hashes")}
    for t in TEST_SETS:
        per = cells[t]
        keys = list(per["kd_off"][0])
        means = {name: {k: sum(r[k] for r in per[name]) / seeds for k in keys} for name in CONFIGURATIONS}
        deltas = [{k: on[k] - off[k] for k in keys} for on, off in zip(per["kd_on"], per["kd_off"])]
        report["test_sets"][t] = {
            "per_seed": per,
            "mean": means,
            "delta_per_seed": deltas,
            "mean_delta": {k: means["kd_on"][k] - means["kd_off"][k] for k in keys},
        }
    return report


def comparison_markdown(report: dict) -> str:
    lines = []
    for t, block in report["test_sets"].items():
        keys = list(block["mean"]["kd_off"])
        lines.append(f"## {t} test set\n")
        lines.append("| configuration | seed | " + " | ".join(keys) + " |")
        lines.append("|" + "---|" * (len(keys) + 2))
        for name in report["configurations"]:
            for s, row in enumerate(block["per_seed"][name]):
                lines.append(f"| {name} | {s} | " + " | ".join(f"{100 * row[k]:.1f}" for k in keys) + " |")
            lines.append(f"| {name} | mean | " + " | ".join(f"{100 * block['mean'][name][k]:.1f}" for k in keys) + " |")
        lines.append("| delta (on - off) | mean | "
                     + " | ".join(f"{100 * block['mean_delta'][k]:+.1f}" for k in keys) + " |")
        lines.append("")
    return "\n".join(lines)


# -- k-fold augmentation table --------------------------------------------------------


def kfold_table(rows: Mapping[str, Sequence[float]]) -> dict:
    """Per-variant fold scores with their arithmetic mean as ``Average``.

    Scores are taken as given (fractions or percentages); the display
    strings round to one decimal.
    """
    table = {}
    for variant, folds in rows.items():
        vals = [float(v) for v in folds]
        avg = sum(vals) / len(vals)
        cols = {f"K{i + 1}": v for i, v in enumerate(vals)}
        cols["Average"] = avg
        table[variant] = cols
    return table


def kfold_markdown(table: Mapping[str, Mapping[str, float]], scale: float = 1.0) -> str:
    cols = list(next(iter(table.values())))
    lines = ["| Augmentation | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    for variant, row in table.items():
        lines.append(f"| {variant} | " + " | ".join(f"{scale * row[c]:.1f}" for c in cols) + " |")
    return "\n".join(lines) + "\n"


def kfold_csv(table: Mapping[str, Mapping[str, float]], scale: float = 1.0) -> str:
    cols = list(next(iter(table.values())))
    out = ["Augmentation," + ",".join(cols)]
    for variant, row in table.items():
        out.append(variant + "," + ",".join(f"{scale * row[c]:.1f}" for c in cols))
    return "\n".join(out) + "\n"


def cmd_kfold(cfg: ExperimentConfig, data: str | Path | None, out: str | Path) -> dict:
    """k-fold teacher training for each configured augmentation variant.

    Folds partition the polyp-proxy train and val splits together; the test
    split stays untouched.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.yaml")
    if data is None:
        data = cfg.data.polyp_dir
    if data is None:
        data = out / "data" / "polyp"
        if not _done(data):
            gen_data("polyp-proxy", cfg.data.polyp_seed, data)
            _mark(data, {"kind": "polyp-proxy", "seed": cfg.data.polyp_seed})
    splits = load_splits(data)
    pool = sd.concat(splits["train"], splits["val"], split="pool")
    rows = {}
    for variant in cfg.kfold.variants:
        vdir = out / "variants" / variant.replace("+", "_")
        if not _done(vdir):
            vcfg = cfg.with_augment(variant)
            tc = replace(vcfg.train, epochs=cfg.kfold.epochs)
            res = run_kfold(pool, cfg.kfold.k, tc, seed=cfg.kfold.seed, class_names=TEACHER_CLASSES)
            _mark(vdir, {"variant": variant, "folds": res["folds"], "mean": res["mean"]})
        rows[variant] = json.loads((vdir / ".done").read_text())["folds"]
    table = kfold_table(rows)
    (out / "kfold.json").write_text(_dumps({"k": cfg.kfold.k, "epochs": cfg.kfold.epochs,
                                            "metric": "val mAP50", "table": table}))
    (out / "kfold.csv").write_text(kfold_csv(table, 100.0))
    (out / "kfold.md").write_text(kfold_markdown(table, 100.0))
    return table
