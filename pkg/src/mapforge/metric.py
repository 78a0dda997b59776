"""Chamfer-thresholded average precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from mapforge.errors import EmptyGeometry
from mapforge.geometry import CLASSES, ElementClass, MapElement

DEFAULT_THRESHOLDS = (0.5, 1.0, 1.5)


@dataclass(frozen=True, eq=False)
class ScoredElement:
    element: MapElement
    score: float
    scene_id: Hashable = 0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")


@dataclass
class APResult:
    per_threshold: dict[str, dict[float, float]] = field(default_factory=dict)
    per_class: dict[str, float] = field(default_factory=dict)
    mAP: float = float("nan")
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "per_threshold": {
                c: {str(t): v for t, v in aps.items()} for c, aps in self.per_threshold.items()
            },
            "per_class": dict(self.per_class),
            "mAP": None if np.isnan(self.mAP) else self.mAP,
        }


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance: mean of the two directed mean nearest distances."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise EmptyGeometry("chamfer distance of an empty point set")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float((d.min(axis=1).mean() + d.min(axis=0).mean()) / 2.0)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve.

    ``tp`` is the true-positive flag of each detection in descending score
    order.
    """
    if num_gt == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=float)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _group(preds: Iterable[ScoredElement], gts: Mapping[Hashable, Sequence[MapElement]], cls):
    cls = ElementClass.parse(cls)
    cand = [p for p in preds if p.element.cls is cls]
    gt_by_scene = {sid: [g for g in els if g.cls is cls] for sid, els in gts.items()}
    return cand, gt_by_scene


def _ordered(cand: list[ScoredElement]) -> list[ScoredElement]:
    scores = np.array([p.score for p in cand], dtype=float)
    order = np.argsort(-scores, kind="stable")
    return [cand[i] for i in order]


def _distances(ordered, gt_by_scene):
    out = []
    for p in ordered:
        gts = gt_by_scene.get(p.scene_id, [])
        out.append(np.array([chamfer_distance(p.element.points, g.points) for g in gts]))
    return out


def _tp_flags(ordered, dists, gt_by_scene, tau) -> np.ndarray:
    taken = {sid: np.zeros(len(g), dtype=bool) for sid, g in gt_by_scene.items()}
    tp = np.zeros(len(ordered))
    for r, (p, d) in enumerate(zip(ordered, dists)):
        if len(d) == 0:
            continue
        free = taken[p.scene_id]
        ok = (~free) & (d <= tau)
        if ok.any():
            j = int(np.argmin(np.where(ok, d, np.inf)))
            free[j] = True
            tp[r] = 1.0
    return tp


def ap_at_threshold(
    preds: Sequence[ScoredElement],
    gts: Mapping[Hashable, Sequence[MapElement]],
    cls,
    tau: float,
) -> float:
    """AP of one class at Chamfer threshold ``tau`` (metres).

    Predictions are taken in descending score; each claims the closest
    still-unmatched GT of its scene and class within ``tau``. Returns NaN
    when the class has no GT.
    """
    if not tau > 0:
        raise ValueError(f"threshold must be positive, got {tau}")
    cand, gt_by_scene = _group(preds, gts, cls)
    num_gt = sum(len(g) for g in gt_by_scene.values())
    ordered = _ordered(cand)
    dists = _distances(ordered, gt_by_scene)
    return average_precision(_tp_flags(ordered, dists, gt_by_scene, tau), num_gt)


def evaluate(
    preds: Sequence[ScoredElement],
    gts: Mapping[Hashable, Sequence[MapElement]],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    classes: Sequence[ElementClass] | None = None,
) -> APResult:
    """Per-class AP at each threshold, averaged over thresholds, then over classes.

    Classes without any GT are left out of the means.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if any(not t > 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    preds = [p for p in preds if p.scene_id in gts]
    result = APResult(thresholds=thresholds)
    for cls in classes or CLASSES:
        cand, gt_by_scene = _group(preds, gts, cls)
        num_gt = sum(len(g) for g in gt_by_scene.values())
        if num_gt == 0:
            continue
        ordered = _ordered(cand)
        dists = _distances(ordered, gt_by_scene)
        aps = {
            t: average_precision(_tp_flags(ordered, dists, gt_by_scene, t), num_gt)
            for t in thresholds
        }
        result.per_threshold[cls.value] = aps
        result.per_class[cls.value] = float(np.mean(list(aps.values())))
    if result.per_class:
        result.mAP = float(np.mean(list(result.per_class.values())))
    return result
