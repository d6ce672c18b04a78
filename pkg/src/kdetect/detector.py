"""A minimal region detector: fixed anchor grid, fixed descriptors, linear heads.

The model scores every anchor of a :class:`ProposalGrid` with an affine
classifier over ``K + 1`` classes (index 0 is background) and predicts
class-specific anchor-relative box deltas with an affine regressor. Teacher
and student share the grid and the descriptor layout, so per-anchor outputs
of the two models are index-aligned.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    NMS_IOU_DEFAULT,
    SCORE_FLOOR_DEFAULT,
    decode_array,
    iou_matrix,
    nms_array,
)

DESCRIPTOR_VERSION = "hist-38/2"
COLOR_BINS = 8
ORIENT_BINS = 8
EDGE_FLOOR = 0.005  # gradient magnitude (intensity in [0, 1]) treated as noise
EDGE_SATURATION = 0.1  # magnitude above the floor counted as a full edge
DESCRIPTOR_DIM = 3 * COLOR_BINS + ORIENT_BINS + 2 + 4
FRAME = (225, 225)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3
IGNORE = -1


# -- proposal grid ----------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    stride: float = 15.0
    scales: tuple = (30.0, 60.0, 120.0)
    ratios: tuple = (0.5, 1.0, 2.0)
    frame: tuple = FRAME

    def to_dict(self) -> dict:
        return {"stride": self.stride, "scales": list(self.scales),
                "ratios": list(self.ratios), "frame": list(self.frame)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(float(d["stride"]), tuple(float(s) for s in d["scales"]),
                   tuple(float(r) for r in d["ratios"]), tuple(int(f) for f in d["frame"]))


@dataclass(frozen=True)
class ProposalGrid:
    config: GridConfig
    anchors: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.anchors)


def candidate_anchor_count(config: GridConfig) -> int:
    nx = max(1, int(config.frame[0] // config.stride))
    ny = max(1, int(config.frame[1] // config.stride))
    return nx * ny * len(config.scales) * len(config.ratios)


def build_grid(stride: float = 15.0, scales: Sequence[float] = (30.0, 60.0, 120.0),
               ratios: Sequence[float] = (0.5, 1.0, 2.0), frame=FRAME) -> ProposalGrid:
    """Anchors ordered center-major (row, then column), then scale, then ratio.

    ``ratio`` is height/width; an anchor of scale ``s`` has area ``s**2``.
    Anchors are clipped to the frame and zero-area results dropped.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    cfg = GridConfig(float(stride), tuple(float(s) for s in scales),
                     tuple(float(r) for r in ratios), tuple(int(f) for f in frame))
    fw, fh = cfg.frame
    nx, ny = max(1, int(fw // cfg.stride)), max(1, int(fh // cfg.stride))
    rows = []
    for iy in range(ny):
        cy = (iy + 0.5) * cfg.stride
        for ix in range(nx):
            cx = (ix + 0.5) * cfg.stride
            for s in cfg.scales:
                for r in cfg.ratios:
                    w, h = s / math.sqrt(r), s * math.sqrt(r)
                    rows.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    a = np.array(rows, dtype=np.float64)
    a[:, 0::2] = np.clip(a[:, 0::2], 0.0, fw)
    a[:, 1::2] = np.clip(a[:, 1::2], 0.0, fh)
    keep = (a[:, 2] > a[:, 0]) & (a[:, 3] > a[:, 1])
    if not keep.any():
        raise ValueError("every anchor is degenerate after clipping")
    return ProposalGrid(cfg, a[keep])


# -- descriptors -------------------------------------------------------------------


class ImageFeatures:
    """Per-pixel channels of one image, ready for per-region descriptors.

    Channels: 24 colour-bin indicators, 8 edge-weighted orientation bins,
    intensity and squared intensity (intensity = R + G + B, an integer).
    Many regions are served from integral tables built on first use; a few
    regions are summed directly, which is cheaper for sampled training anchors.
    """

    DIRECT_LIMIT = 256

    def __init__(self, image: np.ndarray):
        img = np.asarray(image)
        if img.dtype != np.uint8 or img.ndim != 3:
            raise ValueError("expected an (H, W, 3) uint8 raster")
        self.height, self.width = img.shape[:2]
        self.codes = (img >> 5) + np.array([0, COLOR_BINS, 2 * COLOR_BINS], dtype=np.uint8)
        self.intensity = img.astype(np.int64).sum(axis=2)
        gy, gx = np.gradient(self.intensity.astype(np.float64) / 765.0)
        self.magnitude = np.hypot(gx, gy)
        # soft edge indicator above the sensor-noise floor; flat pixels implicitly
        # fill a ninth "no edge" bin, so the 8 stored bins sum to at most 1
        self.edge = np.clip((self.magnitude - EDGE_FLOOR) / EDGE_SATURATION, 0.0, 1.0)
        ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
        self.orient = np.minimum((ang / (2.0 * np.pi / ORIENT_BINS)).astype(np.int64), ORIENT_BINS - 1)
        self._table = None

    @property
    def table(self) -> np.ndarray:
        if self._table is None:
            h, w = self.height, self.width
            n = 3 * COLOR_BINS
            chans = np.zeros((h * w, n + ORIENT_BINS + 2))
            flat = np.arange(h * w)[:, None]
            chans[flat, self.codes.reshape(-1, 3)] = 1.0
            chans[flat[:, 0], n + self.orient.ravel()] = self.edge.ravel()
            chans[:, -2] = self.intensity.ravel()
            chans[:, -1] = self.intensity.ravel() ** 2
            table = np.zeros((h + 1, w + 1, chans.shape[1]))
            np.cumsum(np.cumsum(chans.reshape(h, w, -1), axis=0), axis=1, out=table[1:, 1:])
            self._table = table
        return self._table

    def windows(self, boxes: np.ndarray) -> np.ndarray:
        """Integer pixel windows ``(x0, y0, x1, y1)`` covered by each box."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        x0 = np.clip(np.floor(b[:, 0] + 0.5), 0, self.width - 1).astype(np.int64)
        y0 = np.clip(np.floor(b[:, 1] + 0.5), 0, self.height - 1).astype(np.int64)
        x1 = np.clip(np.floor(b[:, 2] + 0.5), 0, self.width).astype(np.int64)
        y1 = np.clip(np.floor(b[:, 3] + 0.5), 0, self.height).astype(np.int64)
        x1 = np.maximum(x1, x0 + 1)
        y1 = np.maximum(y1, y0 + 1)
        return np.stack([x0, y0, x1, y1], axis=1)

    def _sums_direct(self, w: np.ndarray) -> np.ndarray:
        n = 3 * COLOR_BINS
        out = np.zeros((len(w), n + ORIENT_BINS + 2))
        for k, (x0, y0, x1, y1) in enumerate(w):
            out[k, :n] = np.bincount(self.codes[y0:y1, x0:x1].ravel(), minlength=n)
            out[k, n:n + ORIENT_BINS] = np.bincount(
                self.orient[y0:y1, x0:x1].ravel(), weights=self.edge[y0:y1, x0:x1].ravel(),
                minlength=ORIENT_BINS)
            it = self.intensity[y0:y1, x0:x1]
            out[k, -2] = it.sum()
            out[k, -1] = (it * it).sum()
        return out

    def _sums_integral(self, w: np.ndarray) -> np.ndarray:
        x0, y0, x1, y1 = w.T
        t = self.table
        return t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0]

    def describe(self, boxes: np.ndarray, method: str = "auto") -> np.ndarray:
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        w = self.windows(b)
        if method == "direct" or (method == "auto" and len(b) <= self.DIRECT_LIMIT and self._table is None):
            sums = self._sums_direct(w)
        else:
            sums = self._sums_integral(w)
        x0, y0, x1, y1 = w.T
        npix = ((x1 - x0) * (y1 - y0)).astype(np.float64)
        out = np.empty((len(b), DESCRIPTOR_DIM))
        nc = 3 * COLOR_BINS
        out[:, :nc] = sums[:, :nc] / npix[:, None]
        # edge mass per pixel: keeps edge density, which peaks when a window hugs an outline
        out[:, nc:nc + ORIENT_BINS] = sums[:, nc:nc + ORIENT_BINS] / npix[:, None]
        s1, s2 = sums[:, -2], sums[:, -1]
        # s1, s2 are exact integers, so a constant region gives exactly zero variance
        out[:, nc + ORIENT_BINS] = s1 / (765.0 * npix)
        var = (s2 * npix - s1 * s1) / (765.0 * 765.0 * npix * npix)
        out[:, nc + ORIENT_BINS + 1] = np.clip(4.0 * var, 0.0, 1.0)
        fw, fh = float(self.width), float(self.height)
        out[:, -4] = 0.5 * (b[:, 0] + b[:, 2]) / fw
        out[:, -3] = 0.5 * (b[:, 1] + b[:, 3]) / fh
        out[:, -2] = (b[:, 2] - b[:, 0]) / fw
        out[:, -1] = (b[:, 3] - b[:, 1]) / fh
        return np.clip(out, 0.0, 1.0)


def describe(image: np.ndarray, region) -> np.ndarray:
    """Descriptor of a single region (a ``Box`` or a length-4 sequence)."""
    coords = region.as_tuple() if hasattr(region, "as_tuple") else tuple(region)
    return ImageFeatures(image).describe(np.array([coords]))[0]


def describe_all(image: np.ndarray, grid: ProposalGrid) -> np.ndarray:
    return ImageFeatures(image).describe(grid.anchors)


# -- model --------------------------------------------------------------------------


@dataclass
class DetectorModel:
    class_names: tuple
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_reg: np.ndarray
    b_reg: np.ndarray
    grid_config: GridConfig = GridConfig()
    descriptor_version: str = DESCRIPTOR_VERSION

    PARAM_NAMES = ("w_cls", "b_cls", "w_reg", "b_reg")

    def __post_init__(self):
        k, d = self.num_classes, self.w_cls.shape[1]
        shapes = {"w_cls": (k + 1, d), "b_cls": (k + 1,), "w_reg": (4 * k, d), "b_reg": (4 * k,)}
        for name, shape in shapes.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.w_cls.shape[1]

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.PARAM_NAMES}

    def with_params(self, params: dict) -> "DetectorModel":
        return DetectorModel(self.class_names, *(np.array(params[n], dtype=np.float64) for n in self.PARAM_NAMES),
                             grid_config=self.grid_config, descriptor_version=self.descriptor_version)

    def copy(self) -> "DetectorModel":
        return self.with_params(self.params())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for n in self.PARAM_NAMES:
            arr = np.ascontiguousarray(getattr(self, n), dtype=np.float64)
            h.update(n.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def grid(self) -> ProposalGrid:
        c = self.grid_config
        return build_grid(c.stride, c.scales, c.ratios, c.frame)


def init_model(class_names: Sequence[str], rng: np.random.Generator,
               grid_config: GridConfig = GridConfig(), dim: int = DESCRIPTOR_DIM,
               scale: float = 0.01) -> DetectorModel:
    k = len(class_names)
    return DetectorModel(
        tuple(class_names),
        rng.uniform(-scale, scale, (k + 1, dim)),
        np.zeros(k + 1),
        rng.uniform(-scale, scale, (4 * k, dim)),
        np.zeros(4 * k),
        grid_config,
    )


def forward(model: DetectorModel, descriptors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine heads: ``(logits (n, K+1), deltas (n, 4K))``."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise ValueError(f"descriptor dimension {x.shape[1]} does not match model dimension {model.dim}")
    return x @ model.w_cls.T + model.b_cls, x @ model.w_reg.T + model.b_reg


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


# -- targets --------------------------------------------------------------------------


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                   pos_iou: float = POSITIVE_IOU, neg_iou: float = NEGATIVE_IOU):
    """Label each anchor with a head class (``1..K``), background (0) or IGNORE.

    Returns ``(labels, matched)`` where ``matched[i]`` indexes the ground
    truth assigned to anchor ``i`` (``-1`` for non-positives). Every ground
    truth also claims its highest-IoU anchor, so none is left without a
    positive; the lower index wins any tie.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return labels, matched
    ov = iou_matrix(anchors, gt_boxes)
    best_gt = np.argmax(ov, axis=1)
    best = ov[np.arange(n), best_gt]
    pos = best >= pos_iou
    labels[(best >= neg_iou) & ~pos] = IGNORE
    labels[pos] = gt_labels[best_gt[pos]]
    matched[pos] = best_gt[pos]
    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gt_boxes)):
        col = np.where(claimed, -np.inf, ov[:, g])
        a = int(np.argmax(col))
        claimed[a] = True
        labels[a] = gt_labels[g]
        matched[a] = g
    return labels, matched


# -- inference -------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: tuple
    label: int  # head class index, 1..K
    score: float
    anchor: int


def detect_from_descriptors(model: DetectorModel, anchors: np.ndarray, descriptors: np.ndarray,
                            score_floor: float = SCORE_FLOOR_DEFAULT, nms_iou: float = NMS_IOU_DEFAULT,
                            pre_nms_top_k: int | None = 300, max_detections: int | None = 100) -> list[Detection]:
    logits, deltas = forward(model, descriptors)
    probs = softmax(logits)
    frame = model.grid_config.frame
    found = []
    for c in range(1, model.num_classes + 1):
        scores = probs[:, c]
        idx = np.nonzero(scores >= score_floor)[0]
        if len(idx) == 0:
            continue
        if pre_nms_top_k is not None and len(idx) > pre_nms_top_k:
            order = np.lexsort((idx, -scores[idx]))
            idx = np.sort(idx[order[:pre_nms_top_k]])
        boxes, valid = decode_array(anchors[idx], deltas[idx, 4 * (c - 1):4 * c], clip=frame)
        idx, boxes = idx[valid], boxes[valid]
        keep = nms_array(boxes, scores[idx], nms_iou)
        found.extend(
            Detection(tuple(float(v) for v in boxes[k]), c, float(scores[idx[k]]), int(idx[k]))
            for k in keep
        )
    found.sort(key=lambda d: (-d.score, d.anchor, d.label))
    if max_detections is not None:
        found = found[:max_detections]
    return found


def detect(model: DetectorModel, image: np.ndarray, score_floor: float = SCORE_FLOOR_DEFAULT,
           nms_iou: float = NMS_IOU_DEFAULT, grid: ProposalGrid | None = None, **kw) -> list[Detection]:
    grid = grid or model.grid()
    return detect_from_descriptors(model, grid.anchors, describe_all(image, grid), score_floor, nms_iou, **kw)


# -- checkpoints -------------------------------------------------------------------------

MODEL_FORMAT = "kdetect-model"
MODEL_FORMAT_VERSION = 1


def model_to_dict(model: DetectorModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "class_names": list(model.class_names),
        "grid": model.grid_config.to_dict(),
        "descriptor_version": model.descriptor_version,
        "params": {
            n: {"shape": list(a.shape), "data": [float(v) for v in np.ravel(a, order="C")]}
            for n, a in model.params().items()
        },
    }


def model_from_dict(d: dict) -> DetectorModel:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a kdetect model checkpoint")
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    arrs = [np.array(d["params"][n]["data"], dtype=np.float64).reshape(d["params"][n]["shape"])
            for n in DetectorModel.PARAM_NAMES]
    return DetectorModel(tuple(d["class_names"]), *arrs,
                         grid_config=GridConfig.from_dict(d["grid"]),
                         descriptor_version=d["descriptor_version"])


def save_model(model: DetectorModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), sort_keys=True))


def load_model(path: str | Path) -> DetectorModel:
    return model_from_dict(json.loads(Path(path).read_text()))
