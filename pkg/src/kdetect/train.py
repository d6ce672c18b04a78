"""SGD training loops for the teacher and the distilled student.

Randomness comes from independent named streams (``init``, ``shuffle``,
``sample``, ``augment``) keyed by the run seed and the epoch/image, so
switching the distillation term on or off changes nothing else about a run.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import augment as aug
from .detector import (
    DESCRIPTOR_VERSION,
    DetectorModel,
    GridConfig,
    ImageFeatures,
    assign_targets,
    describe_all,
    forward,
    init_model,
    model_from_dict,
    model_to_dict,
    softmax,
)
from .distill import Batch, KDConfig, loss_and_grad
from .evaluate import evaluate_model
from .geometry import encode_array

log = logging.getLogger(__name__)

_STREAMS = {"init": 1, "shuffle": 2, "sample": 3, "augment": 4}


class DivergedError(RuntimeError):
    pass


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[name], *map(int, keys)]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 60
    batch_images: int = 4
    anchors_per_image: int = 64
    positive_fraction: float = 0.25
    seed: int = 0
    kd: KDConfig = KDConfig()
    kd_enabled: bool = True
    reg_weight: float = 1.0
    augment: aug.AugmentPolicy = aug.AugmentPolicy()
    grid: GridConfig = GridConfig()
    score_floor: float = 0.05
    nms_iou: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_images < 1 or self.anchors_per_image < 1:
            raise ValueError("batch sizes must be positive")
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("kd", "augment", "grid")}
        d["kd"] = self.kd.to_dict()
        d["augment"] = self.augment.to_dict()
        d["grid"] = self.grid.to_dict()
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- optimiser -------------------------------------------------------------------


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: TrainConfig):
    """One momentum-SGD update with weight decay folded into the gradient.

    ``v <- momentum * v + g + weight_decay * w`` then ``w <- w - lr * v``.
    Returns new ``(params, velocity)`` dicts; inputs are not modified.
    """
    if isinstance(params, FrozenTeacher):
        raise TypeError("a frozen teacher cannot be updated")
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape or velocity[name].shape != w.shape:
            raise ValueError(f"shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient in {name}")
        v = cfg.momentum * velocity[name] + g + cfg.weight_decay * w
        new_v[name] = v
        new_p[name] = w - cfg.learning_rate * v
    return new_p, new_v


# -- frozen teacher ------------------------------------------------------------------


class FrozenTeacher:
    """Read-only wrapper around a trained model.

    Parameters are copied and marked non-writeable; the hash taken at freeze
    time can be re-checked with :meth:`verify`.
    """

    def __init__(self, model: DetectorModel):
        m = model.copy()
        for arr in m.params().values():
            arr.setflags(write=False)
        self._model = m
        self.frozen_hash = m.param_hash()

    @property
    def class_names(self):
        return self._model.class_names

    @property
    def grid_config(self) -> GridConfig:
        return self._model.grid_config

    @property
    def descriptor_version(self) -> str:
        return self._model.descriptor_version

    @property
    def model(self) -> DetectorModel:
        return self._model

    def param_hash(self) -> str:
        return self._model.param_hash()

    def verify(self) -> bool:
        return self.param_hash() == self.frozen_hash

    def forward(self, descriptors):
        return forward(self._model, descriptors)

    def probs(self, descriptors) -> np.ndarray:
        return softmax(self.forward(descriptors)[0])

    def accumulate_gradient(self, grads) -> None:
        """Gradients routed at the teacher are discarded."""
        return None


def freeze(model: DetectorModel) -> FrozenTeacher:
    return FrozenTeacher(model)


# -- batches ---------------------------------------------------------------------------


def head_labels(sample_labels: np.ndarray, catalog_names: Sequence[str], class_names: Sequence[str]) -> np.ndarray:
    """Map dataset class indices to model head indices (0 for classes the model lacks)."""
    return np.array([class_names.index(catalog_names[l]) + 1 if catalog_names[l] in class_names else 0
                     for l in sample_labels], dtype=np.int64)


def sample_anchors(labels: np.ndarray, rng: np.random.Generator, total: int, positive_fraction: float) -> np.ndarray:
    """Random positives (at most ``positive_fraction`` of ``total``) padded with negatives."""
    pos = np.nonzero(labels > 0)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(total * positive_fraction))
    pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
    n_neg = min(len(neg), total - n_pos)
    neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
    return np.sort(np.concatenate([pos, neg]))


def _image_batch(sample, anchors, class_names, catalog_names, cfg: TrainConfig, rng, features=None):
    hl = head_labels(sample.labels, catalog_names, class_names)
    labels, matched = assign_targets(anchors, sample.boxes, hl)
    idx = sample_anchors(labels, rng, cfg.anchors_per_image, cfg.positive_fraction)
    lab = labels[idx]
    targets = np.zeros((len(idx), 4))
    pos = lab > 0
    if pos.any():
        targets[pos] = encode_array(anchors[idx[pos]], sample.boxes[matched[idx[pos]]])
    if features is None:
        x = ImageFeatures(sample.image).describe(anchors[idx])
    else:
        x = np.asarray(features[idx], dtype=np.float64)
    return x, lab, targets


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DetectorModel
    final_model: DetectorModel
    best_epoch: int
    best_score: float
    history: list = field(default_factory=list)
    iterations: list = field(default_factory=list)


def _ckpt_payload(params, velocity, epoch, best, best_epoch, best_score, history, cfg, template):
    return {
        "format": "kdetect-train-checkpoint",
        "version": 1,
        "epoch": epoch,
        "config_hash": cfg.digest(),
        "rng": {"scheme": "SeedSequence([seed, stream, epoch, ...])", "seed": cfg.seed, "next_epoch": epoch + 1},
        "model": model_to_dict(template.with_params(params)),
        "velocity": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in velocity.items()},
        "best_model": model_to_dict(template.with_params(best)),
        "best_epoch": best_epoch,
        "best_score": best_score,
        "history": history,
    }


def save_checkpoint(path, payload) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


def precompute_descriptors(dataset, grid_anchors: np.ndarray) -> list:
    """Full-grid descriptors per image, stored as float32 to bound memory."""
    return [ImageFeatures(s.image).describe(grid_anchors).astype(np.float32) for s in dataset.samples]


def train_detector(
    class_names: Sequence[str],
    train_set,
    val_set,
    cfg: TrainConfig,
    teacher: FrozenTeacher | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    val_descriptors: list | None = None,
    stop_after_epoch: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Shared teacher/student loop; returns the best-validation-mAP50 model.

    With ``cfg.kd_enabled`` and a ``teacher``, the teacher scores the same
    sampled anchors and the class-aware penalty joins the loss. Without
    distillation the teacher is never touched.
    """
    class_names = tuple(class_names)
    use_kd = cfg.kd_enabled and teacher is not None
    if use_kd and (teacher.grid_config != cfg.grid or teacher.descriptor_version != DESCRIPTOR_VERSION):
        raise ValueError("teacher and student must share grid and descriptor spec")

    model = init_model(class_names, stream(cfg.seed, "init"), cfg.grid)
    anchors = model.grid().anchors
    catalog = train_set.catalog.merged_classes
    params = {k: v.copy() for k, v in model.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    best, best_epoch, best_score = {k: v.copy() for k, v in params.items()}, 0, -1.0
    history, iterations, start = [], [], 1

    if checkpoint_path is not None and Path(checkpoint_path).exists():
        ck = load_checkpoint(checkpoint_path)
        if ck["config_hash"] == cfg.digest():
            params = model_from_dict(ck["model"]).params()
            velocity = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                        for k, v in ck["velocity"].items()}
            best = model_from_dict(ck["best_model"]).params()
            best_epoch, best_score, history = ck["best_epoch"], ck["best_score"], ck["history"]
            start = ck["epoch"] + 1
            log.info("resuming from epoch %d", start)
        else:
            log.warning("checkpoint config hash differs; starting fresh")

    if metrics_path is not None:
        mp = Path(metrics_path)
        kept = []
        if start > 1 and mp.exists():
            kept = [ln for ln in mp.read_text().splitlines() if json.loads(ln)["epoch"] < start]
        mp.write_text("".join(ln + "\n" for ln in kept))

    cache = None if cfg.augment.enabled else precompute_descriptors(train_set, anchors)
    if val_descriptors is None:
        val_descriptors = precompute_descriptors(val_set, anchors)
    n = len(train_set)
    aug_policy = replace(cfg.augment, seed=int(stream(cfg.seed, "augment").integers(2**31)))
    last = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    for epoch in range(start, last + 1):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_records = []
        for it, first in enumerate(range(0, n, cfg.batch_images)):
            xs, ls, ts = [], [], []
            for img_idx in order[first:first + cfg.batch_images]:
                sample = train_set.samples[img_idx]
                feats = None
                if cfg.augment.enabled:
                    sample = aug.apply(sample, aug_policy, epoch * n + int(img_idx))
                else:
                    feats = cache[img_idx]
                x, lab, tgt = _image_batch(sample, anchors, class_names, catalog, cfg,
                                           stream(cfg.seed, "sample", epoch, int(img_idx)), feats)
                xs.append(x), ls.append(lab), ts.append(tgt)
            batch = Batch(np.concatenate(xs), np.concatenate(ls), np.concatenate(ts))
            tprobs = teacher.probs(batch.descriptors) if use_kd else None
            loss, comps, grads = loss_and_grad(params, batch, tprobs, cfg.kd, class_names,
                                               cfg.reg_weight, use_kd)
            if not math.isfinite(loss):
                raise DivergedError(f"non-finite loss at epoch {epoch}, iteration {it}: {comps}")
            params, velocity = sgd_step(params, grads, velocity, cfg)
            rec = {"epoch": epoch, "iter": it, "loss": loss, "ce": comps["ce"], "kd": comps["kd"],
                   "reg": comps["reg"], "lr": cfg.learning_rate}
            epoch_records.append(rec)
        current = model.with_params(params)
        report = evaluate_model(current, val_set, thresholds=(0.5,), descriptors=val_descriptors,
                                score_floor=cfg.score_floor, nms_iou=cfg.nms_iou)
        score = report.map(0.5)
        if score > best_score:
            best, best_epoch, best_score = {k: v.copy() for k, v in params.items()}, epoch, score
        summary = {"epoch": epoch, "val_map50": score,
                   "loss": float(np.mean([r["loss"] for r in epoch_records])),
                   "ce": float(np.mean([r["ce"] for r in epoch_records])),
                   "kd": float(np.mean([r["kd"] for r in epoch_records])),
                   "reg": float(np.mean([r["reg"] for r in epoch_records]))}
        history.append(summary)
        iterations.extend(epoch_records)
        log.info("epoch %d loss %.4f val mAP50 %.4f", epoch, summary["loss"], score)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                for r in epoch_records:
                    fh.write(json.dumps(r, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, _ckpt_payload(params, velocity, epoch, best, best_epoch,
                                                           best_score, history, cfg, model))
        if on_epoch is not None:
            on_epoch(summary)

    return TrainResult(model.with_params(best), model.with_params(params), best_epoch, best_score,
                       history, iterations)


def train_teacher(train_set, val_set, cfg: TrainConfig, **kw) -> TrainResult:
    """Single-class (polyp) detector; no distillation term."""
    return train_detector(("polyp",), train_set, val_set, replace(cfg, kd_enabled=False), None, **kw)


def train_student(train_set, val_set, teacher: FrozenTeacher | None, cfg: TrainConfig,
                  class_names: Sequence[str] = ("ndbe", "neoplasia", "polyp"), **kw) -> TrainResult:
    """Three-class detector; distilled from ``teacher`` when ``cfg.kd_enabled``."""
    if cfg.kd_enabled and teacher is None:
        raise ValueError("kd_enabled requires a frozen teacher")
    if teacher is not None and not isinstance(teacher, FrozenTeacher):
        raise TypeError("the teacher must be frozen before student training")
    return train_detector(class_names, train_set, val_set, cfg, teacher, **kw)


# -- k-fold --------------------------------------------------------------------------------


def fold_summary(values: Sequence[float]) -> dict:
    vals = [float(v) for v in values]
    return {"folds": vals, "mean": float(sum(vals) / len(vals))}


def run_kfold(data, k: int, cfg: TrainConfig, seed: int = 0, class_names=("polyp",)) -> dict:
    """Train one model per fold and report each fold's val mAP50 and their mean."""
    from .synthdata import kfold_partitions

    if k < 2:
        raise ValueError("k must be at least 2")
    scores = []
    for i, (tr, va) in enumerate(kfold_partitions(data, k, seed)):
        res = train_detector(class_names, tr, va, replace(cfg, kd_enabled=False), None)
        scores.append(res.best_score)
        log.info("fold %d val mAP50 %.4f", i + 1, res.best_score)
    return fold_summary(scores)
