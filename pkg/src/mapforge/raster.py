"""BEV and perspective-view foreground masks rendered from vector GT.

Both renderers reduce to drawing thick segments on a grid of unit cells:
cell ``(r, c)`` covers ``[c, c+1] x [r, r+1]`` in grid coordinates and is
set when its square lies strictly closer than half the line width to a
segment. Testing the whole cell (rather than its centre) means coarsening
the grid can never lose a line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mapforge.geometry import PerceptionRange, Scene, edges
from mapforge.serialization import atomic_write

NEAR_PLANE = 0.1
# Distances within this many cells of the threshold count as ties (off), so
# metre-to-grid rounding cannot flip a line that sits exactly on a cell edge.
TIE_TOL = 1e-9


@dataclass(frozen=True)
class BEVGridSpec:
    range: PerceptionRange = field(default_factory=PerceptionRange)
    cell_size: float = 0.3

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def extent(self) -> tuple[float, float]:
        """Grid-unit extent ``(width, height)``."""
        r = self.range
        return (r.x_max - r.x_min) / self.cell_size, (r.y_max - r.y_min) / self.cell_size

    @property
    def shape(self) -> tuple[int, int]:
        w, h = self.extent
        return math.ceil(h - 1e-9), math.ceil(w - 1e-9)

    def to_grid(self, xy) -> np.ndarray:
        """Metric ``(x, y)`` to grid ``(col, row)``; row 0 is the far edge ``y_max``."""
        xy = np.asarray(xy, dtype=float)
        r = self.range
        return np.stack(
            [(xy[..., 0] - r.x_min) / self.cell_size, (r.y_max - xy[..., 1]) / self.cell_size],
            axis=-1,
        )


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``extrinsics`` maps ego to camera: ``p_cam = R @ p_ego + t``."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=float)
        rot = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if k.shape != (3, 3) or rot.shape != (3, 3):
            raise ValueError("intrinsics and rotation must be 3x3")
        if not (k[0, 0] > 0 and k[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def front(
        cls,
        fx: float = 400.0,
        fy: float | None = None,
        width: int = 640,
        height: int = 360,
        height_m: float = 1.5,
        pitch_deg: float = 0.0,
        cx: float | None = None,
        cy: float | None = None,
    ) -> "Camera":
        """Forward-looking camera at ``height_m`` above the ego origin.

        Ego frame: x right, y forward, z up. Positive pitch tilts the view down.
        """
        fy = fx if fy is None else fy
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        base = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        a = math.radians(pitch_deg)
        tilt = np.array(
            [[1.0, 0.0, 0.0], [0.0, math.cos(a), -math.sin(a)], [0.0, math.sin(a), math.cos(a)]]
        )
        rot = tilt @ base
        t = -rot @ np.array([0.0, 0.0, height_m])
        return cls(k, rot, t, width, height)

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, cam_points) -> np.ndarray:
        """Camera-frame points (z > 0) to pixel coordinates ``(u, v)``."""
        p = np.asarray(cam_points, dtype=float) @ self.intrinsics.T
        return p[..., :2] / p[..., 2:3]


def _liang_barsky(p, d, x0, x1, y0, y1):
    """Boolean per box: does segment ``p + s d``, s in [0, 1], touch the box."""
    t0 = np.zeros_like(x0)
    t1 = np.ones_like(x0)
    ok = np.ones(x0.shape, dtype=bool)
    for pk, qk in ((-d[0], p[0] - x0), (d[0], x1 - p[0]), (-d[1], p[1] - y0), (d[1], y1 - p[1])):
        if pk == 0:
            ok &= qk >= 0
            continue
        r = qk / pk
        if pk < 0:
            t0 = np.maximum(t0, r)
        else:
            t1 = np.minimum(t1, r)
    return ok & (t0 <= t1)


def _point_box_dist(px, py, x0, x1, y0, y1):
    dx = np.maximum(np.maximum(x0 - px, 0.0), px - x1)
    dy = np.maximum(np.maximum(y0 - py, 0.0), py - y1)
    return np.hypot(dx, dy)


def _point_seg_dist(qx, qy, p, d):
    dd = float(d @ d)
    if dd == 0:
        return np.hypot(qx - p[0], qy - p[1])
    s = np.clip(((qx - p[0]) * d[0] + (qy - p[1]) * d[1]) / dd, 0.0, 1.0)
    return np.hypot(qx - p[0] - s * d[0], qy - p[1] - s * d[1])


def segment_box_distance(a, b, x0, x1, y0, y1) -> np.ndarray:
    """Euclidean distance between segment ``ab`` and each axis-aligned box."""
    a = np.asarray(a, dtype=float)
    d = np.asarray(b, dtype=float) - a
    dist = np.minimum(_point_box_dist(a[0], a[1], x0, x1, y0, y1),
                      _point_box_dist(a[0] + d[0], a[1] + d[1], x0, x1, y0, y1))
    for cx, cy in ((x0, y0), (x0, y1), (x1, y0), (x1, y1)):
        dist = np.minimum(dist, _point_seg_dist(cx, cy, a, d))
    return np.where(_liang_barsky(a, d, x0, x1, y0, y1), 0.0, dist)


def draw_segments(mask: np.ndarray, segments, half_width: float, extent=None) -> np.ndarray:
    """Set every cell strictly within ``half_width`` of a segment (grid units).

    ``extent`` clips the cell squares of the last row/column to a
    non-integral grid boundary ``(width, height)``.
    """
    h, w = mask.shape
    ex, ey = extent if extent is not None else (w, h)
    for a, b in np.asarray(segments, dtype=float).reshape(-1, 2, 2):
        lo = np.minimum(a, b) - half_width
        hi = np.maximum(a, b) + half_width
        c0, c1 = max(int(math.floor(lo[0])), 0), min(int(math.floor(hi[0])) + 1, w)
        r0, r1 = max(int(math.floor(lo[1])), 0), min(int(math.floor(hi[1])) + 1, h)
        if c0 >= c1 or r0 >= r1:
            continue
        cols = np.arange(c0, c1, dtype=float)
        rows = np.arange(r0, r1, dtype=float)
        x0, y0 = np.meshgrid(cols, rows)
        x1 = np.minimum(x0 + 1.0, ex)
        y1 = np.minimum(y0 + 1.0, ey)
        dist = segment_box_distance(a, b, x0, x1, y0, y1)
        mask[r0:r1, c0:c1] |= dist < half_width - TIE_TOL
    return mask


def _fill_polygon(mask: np.ndarray, poly: np.ndarray) -> None:
    """Even-odd fill of cells whose centres fall inside ``poly`` (grid units)."""
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = np.zeros((h, w), dtype=bool)
    nxt = np.roll(poly, -1, axis=0)
    for (xa, ya), (xb, yb) in zip(poly, nxt):
        if ya == yb:
            continue
        crosses = (ya > yy) != (yb > yy)
        x_at = xa + (yy - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (xx < x_at)
    mask |= inside


def rasterize_bev(
    scene: Scene,
    spec: BEVGridSpec | None = None,
    line_width: float | None = None,
    fill_polygons: bool = False,
) -> np.ndarray:
    """Binary ``(H, W)`` BEV mask; row 0 is the far edge (``y_max``).

    ``line_width`` is in metres and defaults to one cell.
    """
    spec = spec or BEVGridSpec(scene.range)
    line_width = spec.cell_size if line_width is None else line_width
    if not line_width > 0:
        raise ValueError(f"line_width must be positive, got {line_width}")
    mask = np.zeros(spec.shape, dtype=bool)
    half = line_width / spec.cell_size / 2.0
    for el in scene.elements:
        segs = spec.to_grid(edges(el.points[:, :2], el.closed))
        draw_segments(mask, segs, half, spec.extent)
        if fill_polygons and el.closed:
            _fill_polygon(mask, spec.to_grid(el.points[:, :2]))
    return mask.astype(np.uint8)


def _clip_near(p, q, eps):
    zp, zq = p[2], q[2]
    if zp <= eps and zq <= eps:
        return None
    if zp > eps and zq > eps:
        return p, q
    s = (eps - zp) / (zq - zp)
    cut = p + s * (q - p)
    cut[2] = eps
    return (cut, q) if zp <= eps else (p, cut)


def project_to_pv(
    scene: Scene, camera: Camera, line_width_px: float = 2.0, near: float = NEAR_PLANE
) -> np.ndarray:
    """Binary ``(height, width)`` perspective mask of every element edge.

    2D scenes lie on the ground plane (z = 0). Edges are clipped at the
    near plane ``z_cam = near`` before projection, so geometry behind the
    camera is dropped rather than mirrored.
    """
    if not line_width_px > 0:
        raise ValueError(f"line_width_px must be positive, got {line_width_px}")
    mask = np.zeros((camera.height, camera.width), dtype=bool)
    half = line_width_px / 2.0
    for el in scene.elements:
        pts = el.points
        if pts.shape[1] == 2:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        cam = camera.to_camera(pts)
        segs = []
        for p, q in edges(cam, el.closed):
            clipped = _clip_near(p.copy(), q.copy(), near)
            if clipped is not None:
                segs.append(camera.project(np.stack(clipped)))
        if segs:
            draw_segments(mask, np.stack(segs), half)
    return mask.astype(np.uint8)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary (P5) PGM with foreground 255; written atomically."""
    mask = np.asarray(mask)
    h, w = mask.shape
    data = b"P5\n%d %d\n255\n" % (w, h) + (mask.astype(bool).astype(np.uint8) * 255).tobytes()
    atomic_write(path, data)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    body = raw[len(raw) - w * h:]
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w) > 0).astype(np.uint8)
