"""Seeded synthetic GT scenes and perturbed predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from mapforge.errors import GenerationFailed
from mapforge.geometry import (
    ElementClass,
    MapElement,
    PerceptionRange,
    Scene,
    polyline_length,
    resample,
)
from mapforge.metric import ScoredElement, chamfer_distance

MAX_ELEMENTS = 50
MAX_ATTEMPTS = 200
LANE_HALF_WIDTH = 1.75


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    crossings: int = 2
    dividers: int = 4
    boundaries: int = 2
    centerlines: int = 0
    range: PerceptionRange = field(default_factory=PerceptionRange)
    n_points: int = 20
    dim: int = 2
    line_length: tuple[float, float] = (8.0, 30.0)
    crossing_size: tuple[float, float] = (3.0, 8.0)
    max_curvature: float = 0.05  # 1/m

    def __post_init__(self):
        counts = (self.crossings, self.dividers, self.boundaries, self.centerlines)
        if min(counts) < 0:
            raise ValueError("element counts must be nonnegative")
        if sum(counts) > MAX_ELEMENTS:
            raise ValueError(f"at most {MAX_ELEMENTS} elements per scene")
        if self.n_points < 2 or self.dim not in (2, 3):
            raise ValueError("n_points >= 2 and dim in {2, 3} required")
        for lo, hi in (self.line_length, self.crossing_size):
            if not 0 < lo <= hi:
                raise ValueError(f"invalid size bounds ({lo}, {hi})")
        if self.max_curvature < 0:
            raise ValueError("max_curvature must be nonnegative")

    @property
    def counts(self) -> dict[ElementClass, int]:
        return {
            ElementClass.PED_CROSSING: self.crossings,
            ElementClass.DIVIDER: self.dividers,
            ElementClass.BOUNDARY: self.boundaries,
            ElementClass.CENTERLINE: self.centerlines,
        }

    def with_seed(self, seed: int) -> "SceneRecipe":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class PerturbSpec:
    sigma: float = 0.2
    drop: float = 0.0
    spurious: float = 0.0
    score_noise: float = 0.05
    tau_max: float = 1.5

    def __post_init__(self):
        if self.sigma < 0 or self.score_noise < 0 or self.spurious < 0:
            raise ValueError("sigma, score_noise and spurious must be nonnegative")
        if not 0 <= self.drop <= 1:
            raise ValueError("drop must be a probability")
        if not self.tau_max > 0:
            raise ValueError("tau_max must be positive")


def element_size(el: MapElement) -> float:
    """Length of a polyline, or perimeter of a polygon."""
    return polyline_length(el.points[:, :2], el.closed)


def within_bounds(el: MapElement, recipe: SceneRecipe) -> bool:
    if el.closed:
        lo, hi = recipe.crossing_size
        size_ok = 4 * lo <= element_size(el) <= 4 * hi
    else:
        lo, hi = recipe.line_length
        size_ok = lo <= element_size(el) <= hi
    return size_ok and recipe.range.contains(el.points[:, :2])


def _walk(rng: np.random.Generator, recipe: SceneRecipe) -> np.ndarray:
    r = recipe.range
    length = rng.uniform(*recipe.line_length)
    steps = max(int(math.ceil(length)), 2)
    step = length / steps
    heading = math.pi / 2 + rng.normal(0.0, 0.3) + (math.pi if rng.random() < 0.5 else 0.0)
    kappa = rng.uniform(-recipe.max_curvature, recipe.max_curvature, steps)
    # moving average keeps the bound and smooths the turn rate
    kappa = np.convolve(kappa, np.ones(3) / 3.0, mode="same")
    angles = heading + np.concatenate([[0.0], np.cumsum(kappa[:-1] * step)])
    offsets = np.concatenate([[[0.0, 0.0]], np.cumsum(step * np.stack([np.cos(angles), np.sin(angles)], 1), 0)])
    start = np.array([rng.uniform(r.x_min, r.x_max), rng.uniform(r.y_min, r.y_max)])
    return start + offsets


def _offset(line: np.ndarray, distance: float) -> np.ndarray:
    tangent = np.gradient(line, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return line + distance * normal


def _quad(rng: np.random.Generator, recipe: SceneRecipe) -> np.ndarray:
    r = recipe.range
    a, b = rng.uniform(*recipe.crossing_size, size=2)
    theta = rng.uniform(0.0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b]]) / 2.0
    corners = corners @ np.array([[c, s], [-s, c]])
    if rng.random() < 0.5:
        corners = corners[::-1]
    center = np.array([rng.uniform(r.x_min, r.x_max), rng.uniform(r.y_min, r.y_max)])
    return center + corners


def _lift(rng: np.random.Generator, pts: np.ndarray, recipe: SceneRecipe, closed: bool) -> np.ndarray:
    if recipe.dim == 2:
        return pts
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    z = rng.uniform(-0.5, 0.5) + rng.uniform(-0.02, 0.02) * s
    lo, hi = recipe.range.lower(3)[2], recipe.range.upper(3)[2]
    return np.column_stack([pts, np.clip(z, lo, hi)])


def random_element(rng: np.random.Generator, cls: ElementClass, recipe: SceneRecipe) -> MapElement:
    """Draw one element of ``cls`` satisfying the recipe bounds (rejection sampling)."""
    for _ in range(MAX_ATTEMPTS):
        if cls is ElementClass.PED_CROSSING:
            raw = _quad(rng, recipe)
        elif cls is ElementClass.CENTERLINE:
            raw = _offset(_walk(rng, recipe), LANE_HALF_WIDTH)
        else:
            raw = _walk(rng, recipe)
        raw = _lift(rng, raw, recipe, cls.closed)
        el = MapElement(cls, resample(raw, cls.closed, recipe.n_points))
        if within_bounds(el, recipe):
            return el
    raise GenerationFailed(
        f"could not place a {cls.value} inside {recipe.range} after {MAX_ATTEMPTS} attempts"
    )


def gen_scene(recipe: SceneRecipe) -> Scene:
    rng = np.random.default_rng(recipe.seed)
    elements = [
        random_element(rng, cls, recipe)
        for cls, count in recipe.counts.items()
        for _ in range(count)
    ]
    return Scene(tuple(elements), recipe.range, recipe.dim)


def perturb(scene: Scene, spec: PerturbSpec = PerturbSpec(), seed: int = 0, scene_id=0) -> list[ScoredElement]:
    """Noisy copies of the scene's elements plus spurious low-score extras.

    True survivors score ``clip(1 - chamfer/tau_max + noise, 0, 1)``;
    spurious elements score uniformly in ``[0, 0.5]``.
    """
    rng = np.random.default_rng(seed)
    out: list[ScoredElement] = []
    for el in scene.elements:
        if rng.random() < spec.drop:
            continue
        noisy = el.points + rng.normal(0.0, spec.sigma, el.points.shape) if spec.sigma > 0 else el.points
        score = 1.0 - chamfer_distance(noisy, el.points) / spec.tau_max
        score += rng.normal(0.0, spec.score_noise) if spec.score_noise > 0 else 0.0
        out.append(ScoredElement(el.with_points(noisy), float(np.clip(score, 0.0, 1.0)), scene_id))

    n_spurious = int(rng.poisson(spec.spurious * len(scene.elements))) if spec.spurious > 0 else 0
    if n_spurious:
        present = sorted({el.cls for el in scene.elements}, key=lambda c: c.index)
        recipe = SceneRecipe(range=scene.range, dim=scene.dim, n_points=scene.elements[0].n)
        for _ in range(n_spurious):
            cls = present[int(rng.integers(len(present)))]
            el = random_element(rng, cls, recipe)
            out.append(ScoredElement(el, float(rng.uniform(0.0, 0.5)), scene_id))
    return out
