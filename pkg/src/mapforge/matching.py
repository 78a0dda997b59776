"""Hierarchical bipartite matching.

Instance level: a square cost matrix of focal class cost plus the
permutation-minimal mean Manhattan distance, solved with the Hungarian
algorithm. Point level: for each positive pair, the member of the target's
permutation group with the lowest summed Manhattan distance.

Predictions are passed as arrays: ``logits`` of shape ``(N, C)`` and
``points`` of shape ``(N, Nv, dim)`` in normalized coordinates. Ground truth
is a padded list of :class:`Target` (``None`` marks a no-object slot).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from mapforge.errors import CapacityExceeded, InvalidCost, ShapeMismatch
from mapforge.geometry import (
    MapElement,
    PerceptionRange,
    PermutationGroup,
    identity_group,
    normalize,
)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
# relative slack under which two summed L1 distances count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class Target:
    label: int
    points: np.ndarray
    group: PermutationGroup
    closed: bool = False


@dataclass(frozen=True, eq=False)
class Prediction:
    logits: np.ndarray
    points: np.ndarray


def make_targets(
    elements: Sequence[MapElement],
    rng: PerceptionRange | None = None,
    permutation_equivalent: bool = True,
) -> list[Target]:
    """Convert metric elements to normalized targets.

    With ``permutation_equivalent=False`` every group collapses to the
    identity, which is the fixed-order modeling baseline.
    """
    out = []
    for el in elements:
        pts = normalize(el.points, rng) if rng is not None else np.asarray(el.points, float)
        group = el.group if permutation_equivalent else identity_group(el.n)
        out.append(Target(el.cls.index, pts, group, el.closed))
    return out


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_terms(logits, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Per-class focal loss against a positive and against a negative target."""
    x = np.asarray(logits, dtype=float)
    p = 1.0 / (1.0 + np.exp(-x))
    log_p = _log_sigmoid(x)
    log_1mp = _log_sigmoid(-x)
    pos = -alpha * (1.0 - p) ** gamma * log_p
    neg = -(1.0 - alpha) * p**gamma * log_1mp
    return pos, neg


def focal_cost(logits, target_class: int | None, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> float:
    """Class matching cost ``FL(p_c, 1) - FL(p_c, 0)`` for the target class.

    A no-object target (``None``) costs 0: its one-hot vector is empty, so
    the positive and negative sums coincide.
    """
    if target_class is None:
        return 0.0
    pos, neg = focal_terms(np.asarray(logits, float)[target_class], alpha, gamma)
    return float(pos - neg)


def focal_cost_matrix(logits, labels: Sequence[int | None], alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    logits = np.asarray(logits, dtype=float)
    pos, neg = focal_terms(logits, alpha, gamma)
    diff = pos - neg
    out = np.zeros((len(logits), len(labels)))
    for k, lab in enumerate(labels):
        if lab is not None:
            out[:, k] = diff[:, lab]
    return out


def _permuted(target: Target) -> np.ndarray:
    return target.points[target.group.permutations]


def _manhattan_sums(points: np.ndarray, variants: np.ndarray) -> np.ndarray:
    """Summed Manhattan distance of each prediction to each permuted target.

    ``points`` is ``(N, Nv, d)``, ``variants`` is ``(G, Nv, d)``; returns
    ``(N, G)``. Axes are summed in a fixed order (coordinates left to right,
    then points first to last) so scalar re-evaluation reproduces it bitwise.
    """
    diff = np.abs(points[:, None, :, :] - variants[None, :, :, :])
    per_point = diff[..., 0]
    for a in range(1, diff.shape[-1]):
        per_point = per_point + diff[..., a]
    # points axis leading -> sequential accumulation
    return np.add.reduce(np.moveaxis(per_point, -1, 0), axis=0)


def _canonical_argmin(sums: np.ndarray, variants: np.ndarray) -> np.ndarray:
    """Row-wise argmin of ``sums`` (N, G) with an order-free tie break.

    The L1 distance ties often (a prediction lying on one side of the target
    in both axes scores every reversal the same), and the direction term
    then depends on which member wins. Among members within ``TIE_RTOL`` of
    the row minimum, the lexicographically smallest permuted point sequence
    wins, so the choice depends only on geometry, never on the stored order.
    """
    flat = variants.reshape(len(variants), -1)
    rank = np.empty(len(flat), dtype=np.int64)
    rank[np.lexsort(flat.T[::-1])] = np.arange(len(flat))
    mins = sums.min(axis=1, keepdims=True)
    tied = sums <= mins + TIE_RTOL * (1.0 + np.abs(mins))
    return np.argmin(np.where(tied, rank[None, :], len(flat)), axis=1)


def position_cost(pred_points, target: Target) -> float:
    pred_points = np.asarray(pred_points, dtype=float)
    if pred_points.shape != target.points.shape:
        raise ShapeMismatch(f"prediction {pred_points.shape} vs target {target.points.shape}")
    variants = _permuted(target)
    sums = _manhattan_sums(pred_points[None], variants)
    idx = _canonical_argmin(sums, variants)
    return float(sums[0, idx[0]] / target.points.shape[0])


def position_cost_matrix(points, targets: Sequence[Target]):
    """Return ``(cost, best, sums)``: mean Manhattan cost ``(N, M)``, argmin group
    index and the summed distance it attains."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    cost = np.zeros((n, len(targets)))
    best = np.zeros((n, len(targets)), dtype=np.int64)
    sums_min = np.zeros((n, len(targets)))
    for k, t in enumerate(targets):
        if points.shape[1:] != t.points.shape:
            raise ShapeMismatch(f"prediction {points.shape[1:]} vs target {t.points.shape}")
        variants = _permuted(t)
        sums = _manhattan_sums(points, variants)
        idx = _canonical_argmin(sums, variants)
        best[:, k] = idx
        sums_min[:, k] = sums[np.arange(n), idx]
        cost[:, k] = sums_min[:, k] / t.points.shape[0]
    return cost, best, sums_min


def _unique(slots: Sequence[Target | None]):
    """Distinct targets by identity, and the column index of each slot."""
    uniq: list[Target] = []
    seen: dict[int, int] = {}
    col = np.full(len(slots), -1, dtype=np.int64)
    for k, t in enumerate(slots):
        if t is None:
            continue
        if id(t) not in seen:
            seen[id(t)] = len(uniq)
            uniq.append(t)
        col[k] = seen[id(t)]
    return uniq, col


def instance_cost_matrix(logits, points, slots: Sequence[Target | None]) -> np.ndarray:
    """Square ``N x N`` matrix; entry ``(i, k)`` = focal cost + position cost.

    No-object slots carry only the class term, which is 0.
    """
    return _instance_costs(logits, points, slots)[0]


def _instance_costs(logits, points, slots):
    logits = np.asarray(logits, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(logits) != len(slots) or len(points) != len(slots):
        raise ShapeMismatch(
            f"{len(logits)} predictions for {len(slots)} target slots; pad with None"
        )
    uniq, col = _unique(slots)
    pos_u, best_u, sums_u = position_cost_matrix(points, uniq)
    labels = [t.label for t in uniq]
    cls_u = focal_cost_matrix(logits, labels)
    n = len(slots)
    cost = np.zeros((n, n))
    best = np.full((n, n), -1, dtype=np.int64)
    sums = np.zeros((n, n))
    real = col >= 0
    cost[:, real] = cls_u[:, col[real]] + pos_u[:, col[real]]
    best[:, real] = best_u[:, col[real]]
    sums[:, real] = sums_u[:, col[real]]
    return cost, best, sums


def hungarian(cost) -> np.ndarray:
    """Minimum-cost bijection; returns ``slot_of_pred`` with ``slot_of_pred[i]`` the column for row ``i``."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidCost(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidCost("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(rows), dtype=np.int64)
    out[rows] = cols
    return out


def point_level_match(pred_points, gt_points, group: PermutationGroup):
    """Return ``(k, gamma, cost)`` minimizing summed Manhattan distance over ``group``.

    Ties are broken by the permuted target sequence itself (see
    :func:`_canonical_argmin`), not by group index.
    """
    pred_points = np.asarray(pred_points, dtype=float)
    gt_points = np.asarray(gt_points, dtype=float)
    if pred_points.shape != gt_points.shape or group.n != len(gt_points):
        raise ShapeMismatch(f"prediction {pred_points.shape} vs target {gt_points.shape}")
    variants = gt_points[group.permutations]
    sums = _manhattan_sums(pred_points[None], variants)
    k = int(_canonical_argmin(sums, variants)[0])
    return k, group[k], float(sums[0, k])


@dataclass(frozen=True, eq=False)
class HierarchicalAssignment:
    """Result of instance-level then point-level matching.

    ``slot_of_pred[i]`` / ``pred_of_slot[k]`` encode the instance bijection.
    For each slot ``k`` holding a real target, ``gamma_index[k]`` is the
    chosen member of that target's group (``-1`` for no-object slots) and
    ``point_cost[k]`` the summed Manhattan distance it attains.
    """

    slot_of_pred: np.ndarray
    pred_of_slot: np.ndarray
    gamma_index: np.ndarray
    instance_cost: np.ndarray
    point_cost: np.ndarray
    cost_matrix: np.ndarray

    @property
    def positives(self) -> list[tuple[int, int]]:
        """``(prediction, slot)`` pairs assigned to a real target, in slot order."""
        return [(int(self.pred_of_slot[k]), int(k)) for k in np.flatnonzero(self.gamma_index >= 0)]

    @property
    def total_cost(self) -> float:
        return float(self.instance_cost.sum())

    @property
    def num_positive(self) -> int:
        return int((self.gamma_index >= 0).sum())


def hierarchical_match(logits, points, slots: Sequence[Target | None]) -> HierarchicalAssignment:
    logits = np.asarray(logits, dtype=float)
    points = np.asarray(points, dtype=float)
    cost, best, sums = _instance_costs(logits, points, slots)
    slot_of_pred = hungarian(cost)
    n = len(slots)
    pred_of_slot = np.empty(n, dtype=np.int64)
    pred_of_slot[slot_of_pred] = np.arange(n)
    gamma_index = np.full(n, -1, dtype=np.int64)
    point_cost = np.zeros(n)
    inst = cost[pred_of_slot, np.arange(n)]
    for k, t in enumerate(slots):
        if t is None:
            continue
        # the position term already minimized the same sums over the group
        i = pred_of_slot[k]
        gamma_index[k] = best[i, k]
        point_cost[k] = sums[i, k]
    return HierarchicalAssignment(slot_of_pred, pred_of_slot, gamma_index, inst, point_cost, cost)


def pad_targets(targets: Sequence[Target], n: int) -> list[Target | None]:
    if len(targets) > n:
        raise CapacityExceeded(f"{len(targets)} targets do not fit in {n} slots")
    return list(targets) + [None] * (n - len(targets))


def one_to_many_targets(targets: Sequence[Target], k: int, t: int) -> list[Target | None]:
    """Repeat every target ``k`` times and pad with no-object slots to length ``t``."""
    if k < 1:
        raise ValueError(f"repeat count must be >= 1, got {k}")
    if t < k * len(targets):
        raise CapacityExceeded(f"{k} x {len(targets)} targets do not fit in {t} slots")
    return pad_targets([tg for _ in range(k) for tg in targets], t)
