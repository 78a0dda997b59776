"""Figures for scenes, fit traces and ablation reports.

Built on ``matplotlib.figure.Figure`` directly, so no global pyplot state is
touched. SVG output is byte-stable: the id hash salt is fixed and the date
metadata dropped. Every drawn map element carries a ``gid`` (``gt-<i>`` or
``pred-<i>``) so the SVG can be inspected structurally.
"""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib
import matplotlib.lines
import numpy as np
from matplotlib.figure import Figure

from mapforge.geometry import CLASSES, ElementClass, Scene
from mapforge.metric import ScoredElement
from mapforge.serialization import atomic_write

CLASS_COLORS = {
    ElementClass.PED_CROSSING: "#1f77b4",
    ElementClass.DIVIDER: "#d62728",
    ElementClass.BOUNDARY: "#2ca02c",
    ElementClass.CENTERLINE: "#ff7f0e",
}

_STYLE = {
    "svg.hashsalt": "mapforge",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _closed_xy(points: np.ndarray, closed: bool) -> np.ndarray:
    xy = np.asarray(points)[:, :2]
    return np.vstack([xy, xy[:1]]) if closed else xy


def _save(fig: Figure, path=None, fmt: str = "svg") -> bytes:
    buf = io.BytesIO()
    meta = {"Date": None} if fmt == "svg" else {"Software": None}
    with matplotlib.rc_context(_STYLE):
        fig.savefig(buf, format=fmt, metadata=meta)
    data = buf.getvalue()
    if path is not None:
        atomic_write(path, data)
    return data


def scene_figure(scene: Scene | None, preds: Sequence[ScoredElement] = (), size=(4.0, 6.0)) -> Figure:
    """Top-down view: GT solid, predictions dashed; colour is class, opacity is score."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=size)
        ax = fig.add_subplot()
        rng = scene.range if scene is not None else None
        if scene is not None:
            for i, el in enumerate(scene.elements):
                xy = _closed_xy(el.points, el.closed)
                ax.plot(xy[:, 0], xy[:, 1], "-", color=CLASS_COLORS[el.cls], lw=1.2, gid=f"gt-{i}")
        for i, p in enumerate(preds):
            el = p.element
            xy = _closed_xy(el.points, el.closed)
            alpha = float(np.clip(p.score, 0.05, 1.0))
            ax.plot(
                xy[:, 0], xy[:, 1], "--", color=CLASS_COLORS[el.cls], lw=1.0, alpha=alpha, gid=f"pred-{i}"
            )
        if rng is not None:
            ax.set_xlim(rng.x_min, rng.x_max)
            ax.set_ylim(rng.y_min, rng.y_max)
        ax.set_aspect("equal")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        handles = [
            matplotlib.lines.Line2D([], [], color=CLASS_COLORS[c], label=c.value) for c in CLASSES
        ]
        ax.legend(handles=handles, loc="upper right", fontsize=6, frameon=False)
        fig.tight_layout()
    return fig


def plot_scene_svg(scene: Scene | None, preds: Sequence[ScoredElement] = (), path=None) -> bytes:
    return _save(scene_figure(scene, preds), path, "svg")


def count_svg_elements(svg: bytes | str) -> dict[str, int]:
    """Number of GT and prediction groups in an SVG from :func:`plot_scene_svg`."""
    text = svg.decode() if isinstance(svg, bytes) else svg
    return {"gt": text.count('id="gt-'), "pred": text.count('id="pred-')}


def trace_figure(rows: Sequence[dict], snapshots: Sequence[tuple[int, float]], title: str = "") -> Figure:
    """Loss terms (log scale) on the left, mAP snapshots on the right."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(7.0, 3.0))
        ax_l, ax_m = fig.subplots(1, 2)
        it = np.array([r["iteration"] for r in rows])
        for key in ("total", "cls", "p2p", "one2many"):
            if rows and key in rows[0]:
                ax_l.semilogy(it, np.maximum([r[key] for r in rows], 1e-12), label=key)
        ax_l.set_xlabel("iteration")
        ax_l.set_ylabel("loss")
        ax_l.legend(frameon=False)
        if snapshots:
            s = np.array(snapshots, dtype=float)
            ax_m.plot(s[:, 0], s[:, 1], "o-", ms=2)
        ax_m.set_ylim(-0.02, 1.02)
        ax_m.set_xlabel("iteration")
        ax_m.set_ylabel("mAP")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return fig


def bar_figure(groups: dict[str, dict[str, float]], ylabel: str = "mAP", title: str = "") -> Figure:
    """Grouped bars: ``groups[category][series] = value``."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(5.0, 3.0))
        ax = fig.add_subplot()
        cats = list(groups)
        series = list(dict.fromkeys(s for g in groups.values() for s in g))
        width = 0.8 / max(len(series), 1)
        x = np.arange(len(cats))
        for j, s in enumerate(series):
            offset = (j - (len(series) - 1) / 2) * width
            ax.bar(x + offset, [groups[c].get(s, np.nan) for c in cats], width, label=s)
        ax.set_xticks(x)
        ax.set_xticklabels(cats)
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return fig


def bench_figure(rows) -> Figure:
    """Peak score-matrix bytes against N for each attention variant."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(4.0, 3.0))
        ax = fig.add_subplot()
        for variant in ("vanilla", "decoupled"):
            sel = [r for r in rows if r.variant == variant]
            if sel:
                ax.semilogy([r.n for r in sel], [r.peak_score_bytes for r in sel], "o-", label=variant)
        ax.set_xlabel("N (instance queries)")
        ax.set_ylabel("peak score bytes")
        ax.legend(frameon=False)
        fig.tight_layout()
    return fig


def save_png(fig: Figure, path) -> bytes:
    return _save(fig, path, "png")
