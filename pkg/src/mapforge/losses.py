"""Training losses and their closed-form gradients.

All point losses are evaluated in normalized coordinates and summed over
points and instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mapforge.errors import ShapeMismatch
from mapforge.matching import (
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    HierarchicalAssignment,
    Target,
    hierarchical_match,
    one_to_many_targets,
)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    p2p: float = 5.0
    dir: float = 0.005
    one2one: float = 1.0
    one2many: float = 1.0
    dense: float = 1.0
    bev_seg: float = 1.0
    pv_seg: float = 2.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    grad_points: np.ndarray
    grad_logits: np.ndarray
    diagnostics: dict[str, float] = field(default_factory=dict)
    assignment: HierarchicalAssignment | None = None
    grad_masks: dict[str, np.ndarray] = field(default_factory=dict)


def _focal(x, t, alpha, gamma):
    """Elementwise focal loss and its derivative for 0/1 targets ``t``."""
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = -np.logaddexp(0.0, -x)
    log_1mp = -np.logaddexp(0.0, x)
    loss_pos = -alpha * (1 - p) ** gamma * log_p
    loss_neg = -(1 - alpha) * p**gamma * log_1mp
    grad_pos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
    grad_neg = (1 - alpha) * p**gamma * (p - gamma * (1 - p) * log_1mp)
    return t * loss_pos + (1 - t) * loss_neg, t * grad_pos + (1 - t) * grad_neg


def focal_loss(logits, target_class: int | None, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Sigmoid focal loss summed over classes, one-vs-all targets.

    Returns ``(value, grad_logits)``. ``target_class=None`` means no object.
    """
    x = np.asarray(logits, dtype=float)
    t = np.zeros_like(x)
    if target_class is not None:
        t[..., target_class] = 1.0
    loss, grad = _focal(x, t, alpha, gamma)
    return float(loss.sum()), grad


def p2p_loss(pred_points, gt_points, gamma=None):
    """Summed Manhattan distance between ``pred[j]`` and ``gt[gamma[j]]``.

    The subgradient of ``|d|`` is taken as 0 at ``d == 0``.
    """
    pred = np.asarray(pred_points, dtype=float)
    gt = np.asarray(gt_points, dtype=float)
    if gamma is not None:
        if len(gamma) != len(gt):
            raise ShapeMismatch(f"permutation of length {len(gamma)} for {len(gt)} points")
        gt = gt[np.asarray(gamma)]
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {gt.shape}")
    d = pred - gt
    return float(np.abs(d).sum()), np.sign(d)


def _edge_vectors(points, closed, wrap_open):
    """Edges ``v[j] - v[j+1]`` along the point axis (second to last)."""
    e = points - np.roll(points, -1, axis=-2)
    if closed or wrap_open:
        return e
    return e[..., :-1, :]


def _dir_batch(pred, gt, closed, wrap_open):
    """Batched edge-direction loss over a leading axis; returns per-item values, grads, skipped counts."""
    n = pred.shape[-2]
    a = _edge_vectors(pred, closed, wrap_open)
    b = _edge_vectors(gt, closed, wrap_open)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = np.einsum("...ij,...ij->...i", a, b)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)
    values = -cos.sum(axis=-1)

    # d cos / d a = b / (|a||b|) - cos * a / |a|^2
    dcos = (b / (na_s * nb_s)[..., None] - (cos / na_s**2)[..., None] * a) * ok[..., None]
    m = a.shape[-2]
    # a_j = v_j - v_{j+1}; loss = -sum cos
    grad = np.zeros_like(pred)
    grad[..., :m, :] -= dcos
    nxt = (np.arange(m) + 1) % n
    if m == n:
        grad += np.roll(dcos, 1, axis=-2)
    else:
        grad[..., nxt, :] += dcos
    skipped = (nb == 0).sum(axis=-1)
    zero_pred = ((na == 0) & (nb > 0)).sum(axis=-1)
    return values, grad, skipped, zero_pred


def dir_loss(pred_points, gt_points, gamma=None, closed: bool = False, wrap_open: bool = False):
    """Negative summed cosine similarity between paired edges.

    Edge ``j`` is ``v[j] - v[(j + 1) % n]``. Open elements skip the closing
    edge unless ``wrap_open`` is set. GT edges of zero length are skipped;
    a zero-length predicted edge contributes 0 with zero gradient. Returns
    ``(value, grad_points, diagnostics)``.
    """
    pred = np.asarray(pred_points, dtype=float)
    gt = np.asarray(gt_points, dtype=float)
    if gamma is not None:
        gt = gt[np.asarray(gamma)]
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {gt.shape}")
    if len(pred) < 2:
        raise ShapeMismatch("need at least two points for edges")
    values, grad, skipped, zero_pred = _dir_batch(pred[None], gt[None], closed, wrap_open)
    m = len(pred) if (closed or wrap_open) else len(pred) - 1
    diag = {"edges": float(m), "skipped_gt_edges": float(skipped[0]), "zero_pred_edges": float(zero_pred[0])}
    return float(values[0]), grad[0], diag


def set_loss(
    logits,
    points,
    slots: Sequence[Target | None],
    assignment: HierarchicalAssignment,
    weights: LossWeights = LossWeights(),
    wrap_open: bool = False,
) -> LossReport:
    """``cls * L_cls + p2p * L_p2p + dir * L_dir`` under a given assignment."""
    logits = np.asarray(logits, dtype=float)
    points = np.asarray(points, dtype=float)
    n = len(slots)
    grad_logits = np.zeros_like(logits)
    grad_points = np.zeros_like(points)
    onehot = np.zeros_like(logits)
    for k, t in enumerate(slots):
        if t is not None:
            onehot[assignment.pred_of_slot[k], t.label] = 1.0
    cls_loss, cls_grad = _focal(logits, onehot, FOCAL_ALPHA, FOCAL_GAMMA)
    # per-slot sums accumulated in slot order
    cls_total = 0.0
    for v in cls_loss[assignment.pred_of_slot].sum(axis=1):
        cls_total += v
    grad_logits += weights.cls * cls_grad
    pos = [(int(assignment.pred_of_slot[k]), k) for k in range(n) if slots[k] is not None]
    p2p_total = dir_total = 0.0
    skipped = 0.0
    if pos:
        rows = np.array([i for i, _ in pos])
        pred = points[rows]
        gt = np.stack([slots[k].points[slots[k].group[assignment.gamma_index[k]]] for _, k in pos])
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape[1:]} vs target {gt.shape[1:]}")
        d = pred - gt
        for v in np.abs(d).sum(axis=(1, 2)):
            p2p_total += v
        # each prediction is positive for at most one slot, so row writes do not collide
        grad_points[rows] += weights.p2p * np.sign(d)
        closed = np.array([slots[k].closed for _, k in pos])
        dir_vals = np.zeros(len(pos))
        for flag in (False, True):
            sel = np.flatnonzero(closed == flag)
            if len(sel) == 0:
                continue
            values, g, skip, _ = _dir_batch(pred[sel], gt[sel], flag, wrap_open)
            dir_vals[sel] = values
            grad_points[rows[sel]] += weights.dir * g
            skipped += float(skip.sum())
        for v in dir_vals:
            dir_total += v
    terms = {"cls": cls_total, "p2p": p2p_total, "dir": dir_total}
    total = weights.cls * cls_total + weights.p2p * p2p_total + weights.dir * dir_total
    return LossReport(
        total,
        terms,
        grad_points,
        grad_logits,
        {"num_positive": float(assignment.num_positive), "skipped_gt_edges": skipped},
        assignment,
    )


def one2one_loss(
    logits,
    points,
    slots: Sequence[Target | None],
    assignment: HierarchicalAssignment | None = None,
    weights: LossWeights = LossWeights(),
    wrap_open: bool = False,
) -> LossReport:
    """One-to-one set loss; matches first when no assignment is given."""
    if assignment is None:
        assignment = hierarchical_match(logits, points, slots)
    return set_loss(logits, points, slots, assignment, weights, wrap_open)


def one2many_loss(
    logits,
    points,
    targets: Sequence[Target],
    k: int,
    weights: LossWeights = LossWeights(),
    wrap_open: bool = False,
) -> LossReport:
    """Set loss against ``targets`` repeated ``k`` times over ``len(logits)`` slots."""
    slots = one_to_many_targets(targets, k, len(logits))
    assignment = hierarchical_match(logits, points, slots)
    return set_loss(logits, points, slots, assignment, weights, wrap_open)


def mask_ce_loss(logits, mask):
    """Mean binary cross-entropy over cells; returns ``(value, grad)``."""
    x = np.asarray(logits, dtype=float)
    y = np.asarray(mask, dtype=float)
    if x.shape != y.shape:
        raise ShapeMismatch(f"logits {x.shape} vs mask {y.shape}")
    value = float(np.mean(np.logaddexp(0.0, x) - y * x))
    grad = (1.0 / (1.0 + np.exp(-x)) - y) / x.size
    return value, grad


def total_loss(
    one2one: LossReport | None = None,
    one2many: LossReport | None = None,
    bev_seg: tuple[float, np.ndarray] | None = None,
    pv_seg: tuple[float, np.ndarray] | None = None,
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Weighted sum of the branch losses.

    Point and logit gradients stack the one-to-one rows above the
    one-to-many rows; mask gradients are returned under ``grad_masks``.
    """
    terms: dict[str, float] = {}
    total = 0.0
    gp, gl = [], []
    if one2one is not None:
        terms["one2one"] = one2one.total
        total += weights.one2one * one2one.total
        gp.append(weights.one2one * one2one.grad_points)
        gl.append(weights.one2one * one2one.grad_logits)
    if one2many is not None:
        terms["one2many"] = one2many.total
        total += weights.one2many * one2many.total
        gp.append(weights.one2many * one2many.grad_points)
        gl.append(weights.one2many * one2many.grad_logits)
    masks: dict[str, np.ndarray] = {}
    dense = 0.0
    for name, part, w in (("bev_seg", bev_seg, weights.bev_seg), ("pv_seg", pv_seg, weights.pv_seg)):
        if part is None:
            continue
        value, grad = part
        terms[name] = float(value)
        dense += w * value
        masks[name] = weights.dense * w * np.asarray(grad)
    if bev_seg is not None or pv_seg is not None:
        terms["dense"] = dense
        total += weights.dense * dense
    grad_points = np.concatenate(gp) if gp else np.zeros((0, 0, 0))
    grad_logits = np.concatenate(gl) if gl else np.zeros((0, 0))
    return LossReport(total, terms, grad_points, grad_logits, grad_masks=masks)


def weighted_total(terms: Mapping[str, float], weights: LossWeights = LossWeights()) -> float:
    return weights.cls * terms["cls"] + weights.p2p * terms["p2p"] + weights.dir * terms["dir"]
