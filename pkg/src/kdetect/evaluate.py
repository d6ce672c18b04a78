"""Detection evaluation: greedy matching, all-point interpolated AP and mAP.

AP is the area under the precision envelope, where the precision at each
recall level is replaced by the best precision reached at any higher recall.
Classes with no ground truth in the evaluated set are excluded from mAP.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix

IOU_SWEEP = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))
HEADLINE = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class Pred:
    image: int
    label: int
    score: float
    box: tuple


def _pool(detections: Sequence[Sequence[Pred]], label: int):
    pooled = [(d.score, img, j, d.box)
              for img, dets in enumerate(detections)
              for j, d in enumerate(dets) if d.label == label]
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    return pooled


def match_detections(detections: Sequence[Sequence[Pred]], gt_boxes: Sequence[np.ndarray],
                     gt_labels: Sequence[np.ndarray], label: int, threshold: float):
    """TP/FP flags of class-``label`` detections in pooled score order.

    ``detections[i]`` and ``gt_boxes[i]``/``gt_labels[i]`` belong to image
    ``i``. Each detection takes the highest-IoU still-unmatched ground truth
    of its class and image if that IoU reaches ``threshold``.

    Returns ``(flags, scores, gt_count)``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("IoU threshold must lie in (0, 1]")
    pooled = _pool(detections, label)
    gts = [np.asarray(b, dtype=np.float64).reshape(-1, 4)[np.asarray(l) == label]
           for b, l in zip(gt_boxes, gt_labels)]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    flags = np.zeros(len(pooled), dtype=bool)
    for k, (_, img, _, box) in enumerate(pooled):
        g = gts[img]
        if len(g) == 0:
            continue
        ov = iou_matrix(np.array([box]), g)[0]
        ov[used[img]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= threshold:
            flags[k] = True
            used[img][j] = True
    scores = np.array([p[0] for p in pooled])
    return flags, scores, int(sum(len(g) for g in gts))


def pr_curve(flags: Sequence[bool], gt_count: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(~np.asarray(flags, dtype=bool), dtype=np.float64)
    if gt_count == 0:
        return np.zeros_like(tp), np.zeros_like(tp)
    return tp / gt_count, tp / np.maximum(tp + fp, np.finfo(np.float64).eps)


def average_precision(flags: Sequence[bool], gt_count: int) -> float:
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if gt_count == 0 or len(flags) == 0:
        return 0.0
    rec, prec = pr_curve(flags, gt_count)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def reference_ap_oracle(detections: Sequence[Sequence[Pred]], gt_boxes, gt_labels,
                        label: int, threshold: float) -> float:
    """Brute-force AP for small instances, used to cross-check the fast path.

    For every cut ``k`` of the score-ordered detections the matching is
    redone from scratch on the first ``k`` detections; recall rises by
    ``1/G`` at each cut whose true-positive count grows, and that step is
    credited with the best precision over all cuts at or beyond it.
    """
    pooled = _pool(detections, label)
    gts = [[tuple(map(float, b)) for b, l in zip(np.asarray(bx).reshape(-1, 4), lb) if l == label]
           for bx, lb in zip(gt_boxes, gt_labels)]
    total = sum(len(g) for g in gts)
    if total == 0 or not pooled:
        return 0.0

    def box_iou(a, b):
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        if iw <= 0 or ih <= 0:
            return 0.0
        if tuple(a) == tuple(b):
            return 1.0
        inter = iw * ih
        return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)

    tps, precisions = [], []
    for k in range(1, len(pooled) + 1):
        taken = [set() for _ in gts]
        tp = 0
        for _, img, _, box in pooled[:k]:
            best, best_j = -1.0, None
            for j, g in enumerate(gts[img]):
                if j in taken[img]:
                    continue
                o = box_iou(box, g)
                if o > best:
                    best, best_j = o, j
            if best_j is not None and best >= threshold:
                taken[img].add(best_j)
                tp += 1
        tps.append(tp)
        precisions.append(tp / k)
    ap, prev = 0.0, 0
    for k in range(len(pooled)):
        if tps[k] > prev:
            ap += (tps[k] - prev) / total * max(precisions[k:])
            prev = tps[k]
    return ap


# -- reports ----------------------------------------------------------------------


def _tkey(t: float) -> str:
    return f"{t:.2f}"


@dataclass
class EvalReport:
    class_names: tuple
    thresholds: tuple
    per_class_ap: dict  # class -> threshold key -> AP
    map_at: dict  # threshold key -> mAP
    map_25_75: float | None  # None unless the full 0.25:0.75 sweep was scored
    pr_curves: dict = field(default_factory=dict)  # class -> threshold key -> [[recall, precision], ...]
    counts: dict = field(default_factory=dict)
    classes_in_mean: tuple = ()

    def ap(self, cls: str, t: float) -> float:
        return self.per_class_ap[cls][_tkey(t)]

    def map(self, t: float) -> float:
        return self.map_at[_tkey(t)]

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "thresholds": [_tkey(t) for t in self.thresholds],
            "per_class_ap": self.per_class_ap,
            "map_at": self.map_at,
            "map_25_75": self.map_25_75,
            "pr_curves": self.pr_curves,
            "counts": self.counts,
            "classes_in_mean": list(self.classes_in_mean),
            "interpolation": "all-point precision envelope",
            "map_rule": "mean over classes with ground truth; fixed class set across thresholds",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(tuple(d["class_names"]), tuple(float(t) for t in d["thresholds"]),
                   d["per_class_ap"], d["map_at"], d["map_25_75"], d.get("pr_curves", {}),
                   d.get("counts", {}), tuple(d.get("classes_in_mean", ())))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table_row(self) -> dict:
        """Columns mAP25, mAP50, mAP75, mAP25:75 and AP50 per class, where scored."""
        row = {}
        for name, t in (("mAP25", 0.25), ("mAP50", 0.5), ("mAP75", 0.75)):
            if _tkey(t) in self.map_at:
                row[name] = self.map(t)
        if self.map_25_75 is not None:
            row["mAP25:75"] = self.map_25_75
        if _tkey(0.5) in self.map_at:
            for c in self.class_names:
                row[f"AP50_{c}"] = self.ap(c, 0.5)
        return row

    def to_csv(self) -> str:
        row = self.table_row()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([f"{100.0 * v:.1f}" for v in row.values()])
        return buf.getvalue()


def build_report(detections: Sequence[Sequence[Pred]], gt_boxes, gt_labels, class_names: Sequence[str],
                 thresholds: Iterable[float] = IOU_SWEEP) -> EvalReport:
    """Score detections against ground truth; labels are 1-based indices into ``class_names``."""
    thresholds = tuple(sorted(set(round(float(t), 6) for t in thresholds)))
    if not thresholds or not all(0.0 < t <= 1.0 for t in thresholds):
        raise ValueError("thresholds must be a non-empty set in (0, 1]")
    counts = {c: int(sum(int(np.sum(np.asarray(l) == i + 1)) for l in gt_labels))
              for i, c in enumerate(class_names)}
    present = tuple(c for c in class_names if counts[c] > 0)
    per_class, curves = {}, {}
    for i, c in enumerate(class_names):
        per_class[c], curves[c] = {}, {}
        for t in thresholds:
            flags, _, g = match_detections(detections, gt_boxes, gt_labels, i + 1, t)
            per_class[c][_tkey(t)] = average_precision(flags, g)
            rec, prec = pr_curve(flags, g)
            curves[c][_tkey(t)] = [[float(r), float(p)] for r, p in zip(rec, prec)]
    map_at = {}
    for t in thresholds:
        vals = [per_class[c][_tkey(t)] for c in present]
        map_at[_tkey(t)] = float(np.mean(vals)) if vals else 0.0
    swept = all(_tkey(t) in map_at for t in IOU_SWEEP)
    map_25_75 = float(np.mean([map_at[_tkey(t)] for t in IOU_SWEEP])) if swept else None
    return EvalReport(tuple(class_names), thresholds, per_class, map_at, map_25_75, curves, counts, present)


def _ground_truth(dataset, class_names):
    """Dataset labels (merged-catalog indices) mapped to 1-based head indices."""
    names = dataset.catalog.merged_classes
    boxes, labels = [], []
    for s in dataset.samples:
        lab = []
        for l in s.labels:
            name = names[l]
            lab.append(class_names.index(name) + 1 if name in class_names else 0)
        boxes.append(s.boxes)
        labels.append(np.array(lab, dtype=np.int64))
    return boxes, labels


def evaluate_detections(detections: Sequence[Sequence[Pred]], dataset, class_names: Sequence[str],
                        thresholds: Iterable[float] = IOU_SWEEP) -> EvalReport:
    boxes, labels = _ground_truth(dataset, list(class_names))
    return build_report(detections, boxes, labels, class_names, thresholds)


def evaluate_model(model, dataset, thresholds: Iterable[float] = IOU_SWEEP, descriptors=None,
                   score_floor: float = 0.05, nms_iou: float = 0.5) -> EvalReport:
    """Run the detector over ``dataset`` and score it.

    ``descriptors`` may hold precomputed per-image anchor descriptors.
    """
    from .detector import describe_all, detect_from_descriptors

    names = dataset.catalog.merged_classes
    missing = [c for c in model.class_names if c not in names]
    if missing:
        raise ValueError(f"model classes {missing} are not in the dataset catalogue")
    grid = model.grid()
    dets = []
    for i, s in enumerate(dataset.samples):
        x = describe_all(s.image, grid) if descriptors is None else descriptors[i]
        found = detect_from_descriptors(model, grid.anchors, x, score_floor, nms_iou)
        dets.append([Pred(i, d.label, d.score, d.box) for d in found])
    return evaluate_detections(dets, dataset, model.class_names, thresholds)


# -- prediction files ---------------------------------------------------------------


def write_predictions(path: str | Path, detections: Sequence[Sequence[Pred]], image_ids: Sequence[str],
                      class_names: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for img, dets in enumerate(detections):
            for d in dets:
                rec = {"image": image_ids[img], "class": class_names[d.label - 1], "score": d.score,
                       "x_min": d.box[0], "y_min": d.box[1], "x_max": d.box[2], "y_max": d.box[3]}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_predictions(path: str | Path, image_ids: Sequence[str], class_names: Sequence[str]):
    """Parse a line-delimited prediction file into per-image :class:`Pred` lists."""
    index = {sid: i for i, sid in enumerate(image_ids)}
    out: list[list[Pred]] = [[] for _ in image_ids]
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["class"] not in class_names:
                raise ValueError(f"{path}:{lineno}: unknown class {rec['class']!r}")
            if rec["image"] not in index:
                raise ValueError(f"{path}:{lineno}: unknown image {rec['image']!r}")
            i = index[rec["image"]]
            box = (float(rec["x_min"]), float(rec["y_min"]), float(rec["x_max"]), float(rec["y_max"]))
            out[i].append(Pred(i, class_names.index(rec["class"]) + 1, float(rec["score"]), box))
    return out
