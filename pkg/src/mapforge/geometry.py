"""Map element representation, arc-length resampling and permutation groups.

Points are stored as float arrays of shape ``(n, dim)`` with ``dim`` 2 or 3.
Closed elements never repeat their first point at the end; the closing edge
is implicit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mapforge.errors import DegenerateGeometry, ShapeMismatch


class ElementClass(str, enum.Enum):
    PED_CROSSING = "ped_crossing"
    DIVIDER = "divider"
    BOUNDARY = "boundary"
    CENTERLINE = "centerline"

    @property
    def index(self) -> int:
        return CLASSES.index(self)

    @property
    def closed(self) -> bool:
        return self is ElementClass.PED_CROSSING

    @property
    def directed(self) -> bool:
        return self is ElementClass.CENTERLINE

    @classmethod
    def parse(cls, value) -> "ElementClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return CLASSES[int(value)]
        return cls(str(value))


CLASSES: tuple[ElementClass, ...] = tuple(ElementClass)
NUM_CLASSES = len(CLASSES)


@dataclass(frozen=True)
class PerceptionRange:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0
    z_min: float | None = None
    z_max: float | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"invalid perception range {self}")
        if (self.z_min is None) != (self.z_max is None):
            raise ValueError("z bounds must be given together")
        if self.z_min is not None and not self.z_min < self.z_max:
            raise ValueError(f"invalid z bounds {self.z_min}, {self.z_max}")

    @property
    def has_z(self) -> bool:
        return self.z_min is not None

    def lower(self, dim: int) -> np.ndarray:
        lo = [self.x_min, self.y_min]
        if dim == 3:
            lo.append(self.z_min if self.has_z else -5.0)
        return np.asarray(lo, dtype=float)

    def upper(self, dim: int) -> np.ndarray:
        hi = [self.x_max, self.y_max]
        if dim == 3:
            hi.append(self.z_max if self.has_z else 3.0)
        return np.asarray(hi, dtype=float)

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> bool:
        points = np.asarray(points, dtype=float)
        dim = points.shape[-1]
        return bool(
            np.all(points >= self.lower(dim) - tol) and np.all(points <= self.upper(dim) + tol)
        )

    def to_dict(self) -> dict:
        out = {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min, "y_max": self.y_max}
        if self.has_z:
            out.update(z_min=self.z_min, z_max=self.z_max)
        return out


@dataclass(frozen=True)
class PermutationGroup:
    """Index maps ``gamma`` with ``output[j] = points[gamma[j]]``; row 0 is the identity."""

    permutations: np.ndarray

    def __len__(self) -> int:
        return len(self.permutations)

    def __iter__(self):
        return iter(self.permutations)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.permutations[k]

    @property
    def n(self) -> int:
        return self.permutations.shape[1]


@dataclass(frozen=True, eq=False)
class MapElement:
    cls: ElementClass
    points: np.ndarray
    closed: bool | None = None
    directed: bool | None = None

    def __post_init__(self):
        cls = ElementClass.parse(self.cls)
        object.__setattr__(self, "cls", cls)
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (2, 3):
            raise ShapeMismatch(f"points must have shape (n, 2|3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("element points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        closed = cls.closed if self.closed is None else bool(self.closed)
        directed = cls.directed if self.directed is None else bool(self.directed)
        if closed and directed:
            raise ValueError("an element cannot be both closed and directed")
        if closed != cls.closed or directed != cls.directed:
            raise ValueError(
                f"{cls.value} requires closed={cls.closed}, directed={cls.directed}"
            )
        object.__setattr__(self, "closed", closed)
        object.__setattr__(self, "directed", directed)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def group(self) -> PermutationGroup:
        return permutation_group(self.closed, self.directed, self.n)

    def with_points(self, points) -> "MapElement":
        return MapElement(self.cls, points, self.closed, self.directed)

    def __eq__(self, other):
        if not isinstance(other, MapElement):
            return NotImplemented
        return (
            self.cls is other.cls
            and self.closed == other.closed
            and self.directed == other.directed
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    __hash__ = None


@dataclass(frozen=True)
class Scene:
    elements: tuple[MapElement, ...] = ()
    range: PerceptionRange = field(default_factory=PerceptionRange)
    dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        for el in self.elements:
            if el.dim != self.dim:
                raise ShapeMismatch(f"element of dim {el.dim} in a {self.dim}D scene")

    def __len__(self) -> int:
        return len(self.elements)

    def of_class(self, cls) -> list[MapElement]:
        cls = ElementClass.parse(cls)
        return [el for el in self.elements if el.cls is cls]


def _ring(points: np.ndarray) -> np.ndarray:
    if len(points) > 2 and np.array_equal(points[0], points[-1]):
        return points[:-1]
    return points


def resample(raw_points, closed: bool, n: int) -> np.ndarray:
    """Return ``n`` points equally spaced in arc length along the input chain.

    The first output point is the first input point. Open chains end on their
    last input point; closed chains are treated as rings and the closing edge
    counts towards the perimeter.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    pts = np.asarray(raw_points, dtype=float)
    if pts.ndim != 2 or len(pts) < 2:
        raise DegenerateGeometry("need at least two raw points")
    if closed:
        pts = _ring(pts)
        pts = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 0])
    pts = pts[keep]
    seg = seg[seg > 0]
    total = seg.sum()
    if len(pts) < 2 or not total > 0:
        raise DegenerateGeometry("input has zero arc length")

    cum = np.concatenate([[0.0], np.cumsum(seg)])
    cum[-1] = total
    if closed:
        s = np.arange(n) * (total / n)
    else:
        s = np.arange(n) * (total / (n - 1))
        s[-1] = total
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    t = (s - cum[idx]) / seg[idx]
    out = pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])
    out[0] = pts[0]
    if not closed:
        out[-1] = pts[-1]
    return out


def permutation_group(closed: bool, directed: bool, n: int) -> PermutationGroup:
    """Equivalent orderings of an ``n``-point element.

    Open undirected: identity and reversal. Directed: identity only. Closed:
    each cyclic shift followed by its reversal, ``2n`` maps indexed as
    ``gamma[2s](j) = (j + s) % n`` and ``gamma[2s + 1](j) = n - 1 - (j + s) % n``.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if closed and directed:
        raise ValueError("closed elements cannot be directed")
    j = np.arange(n)
    if directed:
        perms = j[None, :]
    elif not closed:
        perms = np.stack([j, n - 1 - j])
    else:
        perms = np.empty((2 * n, n), dtype=np.int64)
        for s in range(n):
            shifted = (j + s) % n
            perms[2 * s] = shifted
            perms[2 * s + 1] = n - 1 - shifted
    perms = np.ascontiguousarray(perms, dtype=np.int64)
    perms.setflags(write=False)
    return PermutationGroup(perms)


def identity_group(n: int) -> PermutationGroup:
    return permutation_group(False, True, n)


def apply_permutation(points, gamma) -> np.ndarray:
    points = np.asarray(points)
    gamma = np.asarray(gamma)
    if gamma.ndim != 1 or len(points) != len(gamma):
        raise ShapeMismatch(f"{len(points)} points but permutation of length {len(gamma)}")
    return points[gamma]


def normalize(points, rng: PerceptionRange) -> np.ndarray:
    """Affinely map metric coordinates to the unit box of ``rng``."""
    points = np.asarray(points, dtype=float)
    dim = points.shape[-1]
    lo, hi = rng.lower(dim), rng.upper(dim)
    return (points - lo) / (hi - lo)


def denormalize(points, rng: PerceptionRange) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    dim = points.shape[-1]
    lo, hi = rng.lower(dim), rng.upper(dim)
    return lo + points * (hi - lo)


def polyline_length(points, closed: bool = False) -> float:
    points = np.asarray(points, dtype=float)
    if closed:
        points = np.vstack([points, points[:1]])
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def edges(points, closed: bool) -> np.ndarray:
    """Segment endpoints ``(E, 2, dim)``; closed elements include the closing edge."""
    points = np.asarray(points, dtype=float)
    nxt = np.roll(points, -1, axis=0)
    segs = np.stack([points, nxt], axis=1)
    return segs if closed else segs[:-1]


def make_element(cls, raw_points: Sequence, n: int = 20) -> MapElement:
    cls = ElementClass.parse(cls)
    return MapElement(cls, resample(raw_points, cls.closed, n))
