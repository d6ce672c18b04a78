"""Student losses: cross-entropy, smooth-L1 box regression and the
class-aware Bhattacharyya penalty, with analytic gradients.

For every student foreground class ``c`` the penalty compares the student's
class-``c`` probability column over the ``n`` anchors of a batch with the
frozen teacher's polyp column over the same anchors::

    B_c = -lambda_c * ln(max(sum_i sqrt(u_i * v_i), eps))
    D   = sum_c B_c / sum_c lambda_c

where ``u``/``v`` are the columns rescaled to sum to one over the batch
(``normalize_over_batch``, the default) or taken raw.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .detector import IGNORE, softmax


@dataclass(frozen=True)
class KDConfig:
    lambda_ndbe: float = 0.165
    lambda_neoplasia: float = 0.33
    lambda_polyp: float = 0.33
    eps_floor: float = 1e-7
    normalize_over_batch: bool = True

    def __post_init__(self):
        lams = (self.lambda_ndbe, self.lambda_neoplasia, self.lambda_polyp)
        if min(lams) <= 0:
            raise ValueError("every class weight must be positive")
        if not 0.0 < self.eps_floor < 1e-3:
            raise ValueError("eps_floor must lie in (0, 1e-3)")

    def weight(self, class_name: str) -> float:
        return {"ndbe": self.lambda_ndbe, "neoplasia": self.lambda_neoplasia,
                "polyp": self.lambda_polyp}[class_name]

    def weights_for(self, class_names: Sequence[str]) -> np.ndarray:
        return np.array([self.weight(c) for c in class_names], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


class EmptyDistributionError(ValueError):
    """A probability column carries no mass, so it cannot be normalised."""


def _prepare(u, v, normalize: bool):
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or len(u) == 0:
        raise ValueError("u and v must be non-empty and of equal length")
    su, sv = u.sum(), v.sum()
    if su <= 0 or sv <= 0:
        raise EmptyDistributionError("all-zero probability column; batch has no foreground mass")
    if normalize:
        return u / su, v / sv, su
    return u, v, 1.0


def bhattacharyya_coefficient(u, v, normalize: bool = True) -> float:
    uh, vh, _ = _prepare(u, v, normalize)
    return float(np.sum(np.sqrt(uh * vh)))


def bhattacharyya_distance(u, v, lam: float = 1.0, eps: float = 1e-7, normalize: bool = True) -> float:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    bc = bhattacharyya_coefficient(u, v, normalize)
    return float(-lam * np.log(max(bc, eps)))


def _weights(cfg, class_names, weights):
    lam = cfg.weights_for(class_names) if weights is None else np.asarray(weights, dtype=np.float64)
    if lam.sum() <= 0:
        raise ValueError("class weights must have a positive sum")
    return lam


def _penalty_core(log_ps: np.ndarray, v: np.ndarray, cfg: KDConfig, lam: np.ndarray):
    """``D``, the ``B_c`` and ``dD/d(ln P)`` from student log-probabilities.

    Working in log space keeps the batch normalisation finite when a softmax
    column underflows to zero.
    """
    v = np.asarray(v, dtype=np.float64)
    sv = v.sum()
    if sv <= 0:
        raise EmptyDistributionError("all-zero teacher column; batch has no foreground mass")
    vh = v / sv if cfg.normalize_over_batch else v
    per_class = np.zeros(len(lam))
    grad = np.zeros_like(log_ps)
    for c in range(len(lam)):
        ell = log_ps[:, c + 1]
        if cfg.normalize_over_batch:
            uh = np.exp(ell - (ell.max() + np.log(np.sum(np.exp(ell - ell.max())))))
        else:
            uh = np.exp(ell)
        root = np.sqrt(uh * vh)
        bc = float(root.sum())
        per_class[c] = -lam[c] * np.log(max(bc, cfg.eps_floor))
        if bc > cfg.eps_floor and lam[c] != 0.0:
            dbc = 0.5 * root - (0.5 * uh * bc if cfg.normalize_over_batch else 0.0)
            grad[:, c + 1] = -lam[c] * dbc / bc
    norm = lam.sum()
    return float(per_class.sum() / norm), per_class, grad / norm


def kd_penalty(student_probs: np.ndarray, teacher_probs: np.ndarray, cfg: KDConfig = KDConfig(),
               class_names: Sequence[str] = ("ndbe", "neoplasia", "polyp")):
    """Class-aware penalty ``D`` and the weighted per-class distances ``B_c``."""
    d, per_class, _ = kd_penalty_grad(student_probs, teacher_probs, cfg, class_names)
    return d, per_class


def kd_penalty_grad(student_probs: np.ndarray, teacher_probs: np.ndarray, cfg: KDConfig = KDConfig(),
                    class_names: Sequence[str] = ("ndbe", "neoplasia", "polyp"),
                    weights: np.ndarray | None = None):
    """As :func:`kd_penalty`, plus ``dD/dP`` for the student probabilities.

    ``weights`` overrides the config's per-class lambdas (zeros allowed),
    which is how a single class's contribution is isolated in tests.
    """
    ps = np.asarray(student_probs, dtype=np.float64)
    pt = np.asarray(teacher_probs, dtype=np.float64)
    _check_aligned(ps, pt, class_names)
    if np.any(ps[:, 1:].sum(axis=0) <= 0):
        raise EmptyDistributionError("all-zero student column; batch has no foreground mass")
    with np.errstate(divide="ignore"):
        log_ps = np.log(ps)
    d, per_class, g_log = _penalty_core(log_ps, pt[:, 1], cfg, _weights(cfg, class_names, weights))
    grad = np.divide(g_log, ps, out=np.zeros_like(ps), where=ps > 0)
    return d, per_class, grad


def _check_aligned(ps, pt, class_names):
    if ps.shape[0] != pt.shape[0]:
        raise ValueError("student and teacher probabilities must cover the same anchors")
    if ps.shape[1] != len(class_names) + 1:
        raise ValueError("student probabilities do not match class_names")


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None) -> float:
    return cross_entropy_grad(logits, labels, mask)[0]


def cross_entropy_grad(logits, labels, mask=None):
    """Mean ``-ln softmax(z)[y]`` over unmasked anchors and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    valid = (y != IGNORE) if mask is None else (np.asarray(mask, dtype=bool) & (y != IGNORE))
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross-entropy needs at least one non-ignored anchor")
    if np.any((y[valid] < 0) | (y[valid] >= z.shape[1])):
        raise ValueError("label out of range")
    zv = z[valid]
    m = zv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(zv - m), axis=1))
    rows = np.arange(n)
    loss = float(np.sum(lse - zv[rows, y[valid]]) / n)
    grad = np.zeros_like(z)
    p = softmax(zv)
    p[rows, y[valid]] -= 1.0
    grad[valid] = p / n
    return loss, grad


def smooth_l1(pred: np.ndarray, target: np.ndarray, positive: np.ndarray) -> float:
    return smooth_l1_grad(pred, target, positive)[0]


def smooth_l1_grad(pred, target, positive):
    """Smooth-L1 summed over 4 coordinates, averaged over positive anchors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 4)
    pos = np.asarray(positive, dtype=bool).reshape(-1)
    grad = np.zeros_like(pred)
    npos = int(pos.sum())
    if npos == 0:
        return 0.0, grad
    r = pred[pos] - target[pos]
    a = np.abs(r)
    loss = float(np.sum(np.where(a < 1.0, 0.5 * r * r, a - 0.5)) / npos)
    grad[pos] = np.where(a < 1.0, r, np.sign(r)) / npos
    return loss, grad


def select_slots(deltas: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Pick each anchor's 4-wide delta slot for its label (zeros for non-positives)."""
    out = np.zeros((len(labels), 4))
    pos = labels > 0
    if pos.any():
        cols = 4 * (labels[pos] - 1)[:, None] + np.arange(4)
        out[pos] = np.take_along_axis(deltas[pos], cols, axis=1)
    return out


@dataclass
class Batch:
    """Sampled anchors of one step.

    ``labels`` are head indices (0 background, ``1..K``, ``IGNORE``);
    ``reg_targets`` are encoded deltas, meaningful only where ``labels > 0``.
    """

    descriptors: np.ndarray
    labels: np.ndarray
    reg_targets: np.ndarray


def loss_and_grad(params: dict, batch: Batch, teacher_probs: np.ndarray | None = None,
                  kd: KDConfig = KDConfig(), class_names: Sequence[str] = ("ndbe", "neoplasia", "polyp"),
                  reg_weight: float = 1.0, kd_enabled: bool = True, kd_weights: np.ndarray | None = None):
    """Total student loss ``L_ce + D + reg_weight * L_reg`` and its parameter gradient.

    Returns ``(loss, components, grads)`` where ``components`` holds
    ``ce``, ``kd``, ``reg`` (the weighted term), ``reg_raw`` and the per-class
    distances. The teacher enters only through the constant ``teacher_probs``.
    """
    x = np.asarray(batch.descriptors, dtype=np.float64)
    labels = np.asarray(batch.labels, dtype=np.int64)
    logits = x @ params["w_cls"].T + params["b_cls"]
    deltas = x @ params["w_reg"].T + params["b_reg"]

    ce, dz = cross_entropy_grad(logits, labels)
    kd_val, per_class = 0.0, np.zeros(len(class_names))
    if kd_enabled:
        if teacher_probs is None:
            raise ValueError("kd_enabled requires teacher probabilities")
        pt = np.asarray(teacher_probs, dtype=np.float64)
        _check_aligned(logits, pt, class_names)
        m = logits.max(axis=1, keepdims=True)
        log_ps = logits - m - np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))
        kd_val, per_class, g_log = _penalty_core(log_ps, pt[:, 1], kd, _weights(kd, class_names, kd_weights))
        # d ln p_c / dz = onehot_c - p
        dz = dz + g_log - np.exp(log_ps) * g_log.sum(axis=1, keepdims=True)

    pos = labels > 0
    reg_raw, dslot = smooth_l1_grad(select_slots(deltas, labels), batch.reg_targets, pos)
    dr = np.zeros_like(deltas)
    if pos.any():
        cols = 4 * (labels[pos] - 1)[:, None] + np.arange(4)
        rows = np.nonzero(pos)[0]
        dr[rows[:, None], cols] = reg_weight * dslot[pos]

    grads = {"w_cls": dz.T @ x, "b_cls": dz.sum(axis=0), "w_reg": dr.T @ x, "b_reg": dr.sum(axis=0)}
    reg = reg_weight * reg_raw
    loss = ce + kd_val + reg
    comps = {"ce": ce, "kd": kd_val, "reg": reg, "reg_raw": reg_raw,
             "kd_per_class": per_class.tolist()}
    return loss, comps, grads


def total_student_loss(params, batch, teacher_probs=None, kd=KDConfig(),
                       class_names=("ndbe", "neoplasia", "polyp"), reg_weight=1.0, kd_enabled=True):
    loss, comps, _ = loss_and_grad(params, batch, teacher_probs, kd, class_names, reg_weight, kd_enabled)
    return loss, comps
