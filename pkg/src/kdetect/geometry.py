"""Axis-aligned box arithmetic.

Boxes are stored in corner form ``(x_min, y_min, x_max, y_max)`` in pixel
units with the origin at the top-left of the image. Center/size form only
appears inside :func:`encode_box` / :func:`decode_box`.

Scalar helpers take :class:`Box` objects; the ``*_array`` variants work on
``(N, 4)`` float arrays and are what the detector uses internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NMS_IOU_DEFAULT = 0.5
SCORE_FLOOR_DEFAULT = 0.05


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBoxError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBoxError(f"box has non-positive area: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class BoxDelta:
    """Anchor-relative offsets: center shift in anchor units, log size ratios."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError(f"non-finite box delta {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return inter / (a.area + b.area - inter)


def encode_box(anchor: Box, target: Box) -> BoxDelta:
    acx, acy = anchor.center
    tcx, tcy = target.center
    return BoxDelta(
        (tcx - acx) / anchor.width,
        (tcy - acy) / anchor.height,
        math.log(target.width / anchor.width),
        math.log(target.height / anchor.height),
    )


def decode_box(
    anchor: Box, delta: BoxDelta, clip: tuple[float, float] | None = None
) -> Box | None:
    """Inverse of :func:`encode_box`.

    ``clip`` is an optional ``(width, height)`` frame; the decoded box is
    clamped to ``[0, width] x [0, height]``. Returns ``None`` when the result
    has zero area (a rejected box).
    """
    acx, acy = anchor.center
    cx = acx + delta.tx * anchor.width
    cy = acy + delta.ty * anchor.height
    w = anchor.width * math.exp(delta.tw)
    h = anchor.height * math.exp(delta.th)
    x0, y0, x1, y1 = cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h
    if clip is not None:
        fw, fh = clip
        x0, x1 = min(max(x0, 0.0), fw), min(max(x1, 0.0), fw)
        y0, y1 = min(max(y0, 0.0), fh), min(max(y1, 0.0), fh)
    if not (x0 < x1 and y0 < y1) or not all(map(math.isfinite, (x0, y0, x1, y1))):
        return None
    return Box(x0, y0, x1, y1)


def nms(
    detections: Sequence[tuple[Box, float]], iou_threshold: float = NMS_IOU_DEFAULT
) -> list[tuple[Box, float]]:
    """Greedy non-maximum suppression.

    A detection survives iff its IoU with every already-kept detection is
    strictly below ``iou_threshold``. Equal scores keep input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    if not detections:
        return []
    boxes = np.array([d[0].as_tuple() for d in detections], dtype=np.float64)
    scores = np.array([d[1] for d in detections], dtype=np.float64)
    keep = nms_array(boxes, scores, iou_threshold)
    return [(detections[i][0], detections[i][1]) for i in keep]


# -- vectorised helpers -------------------------------------------------------


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    out = np.where(inter > 0.0, inter / union, 0.0)
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[same] = 1.0
    return out


def encode_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    dx = (0.5 * (targets[:, 0] + targets[:, 2]) - 0.5 * (anchors[:, 0] + anchors[:, 2])) / aw
    dy = (0.5 * (targets[:, 1] + targets[:, 3]) - 0.5 * (anchors[:, 1] + anchors[:, 3])) / ah
    return np.stack([dx, dy, np.log(tw / aw), np.log(th / ah)], axis=1)


def decode_array(
    anchors: np.ndarray, deltas: np.ndarray, clip: tuple[float, float] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Decode ``(N, 4)`` deltas; returns ``(boxes, valid_mask)``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = 0.5 * (anchors[:, 0] + anchors[:, 2]) + deltas[:, 0] * aw
    cy = 0.5 * (anchors[:, 1] + anchors[:, 3]) + deltas[:, 1] * ah
    # exp overflow is mapped to inf and then rejected by the validity mask
    with np.errstate(over="ignore", invalid="ignore"):
        w = aw * np.exp(deltas[:, 2])
        h = ah * np.exp(deltas[:, 3])
        out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip is not None:
        fw, fh = clip
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, fw)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, fh)
    valid = np.all(np.isfinite(out), axis=1) & (out[:, 0] < out[:, 2]) & (out[:, 1] < out[:, 3])
    return out, valid


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Indices kept by greedy NMS, in descending score order (stable on ties)."""
    order = np.argsort(-scores, kind="stable")
    boxes = boxes[order]
    areas = area_array(boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        keep.append(order[pos])
        rest = slice(pos + 1, None)
        iw = np.minimum(boxes[pos, 2], boxes[rest, 2]) - np.maximum(boxes[pos, 0], boxes[rest, 0])
        ih = np.minimum(boxes[pos, 3], boxes[rest, 3]) - np.maximum(boxes[pos, 1], boxes[rest, 1])
        inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
        ov = np.where(inter > 0.0, inter / (areas[pos] + areas[rest] - inter), 0.0)
        ov[np.all(boxes[rest] == boxes[pos], axis=1)] = 1.0
        suppressed[rest] |= ov >= iou_threshold
    return np.array(keep, dtype=np.int64)
