"""JSON scene and prediction files.

Coordinates are always stored in metres. A scene file holds one scene; a
prediction file maps scene ids to scored elements.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from mapforge.geometry import CLASSES, MapElement, PerceptionRange, Scene
from mapforge.metric import ScoredElement

VERSION = "mapforge/1"

_CLASS_NAMES = [c.value for c in CLASSES]

_POINTS = {
    "type": "array",
    "minItems": 2,
    "items": {"type": "array", "minItems": 2, "maxItems": 3, "items": {"type": "number"}},
}

SCENE_SCHEMA = {
    "type": "object",
    "required": ["version", "dim", "range", "elements"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": VERSION},
        "dim": {"enum": [2, 3]},
        "range": {
            "type": "object",
            "required": ["x_min", "x_max", "y_min", "y_max"],
            "additionalProperties": False,
            "properties": {
                k: {"type": "number"} for k in ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")
            },
        },
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class", "closed", "directed", "points"],
                "additionalProperties": False,
                "properties": {
                    "class": {"enum": _CLASS_NAMES},
                    "closed": {"type": "boolean"},
                    "directed": {"type": "boolean"},
                    "points": _POINTS,
                },
            },
        },
    },
}

PREDICTION_SCHEMA = {
    "type": "object",
    "required": ["version", "scenes"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": VERSION},
        "scenes": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["class", "score", "points"],
                    "additionalProperties": False,
                    "properties": {
                        "class": {"enum": _CLASS_NAMES},
                        "score": {"type": "number", "minimum": 0, "maximum": 1},
                        "points": _POINTS,
                    },
                },
            },
        },
    },
}


class FormatError(ValueError):
    pass


def _points_list(points: np.ndarray) -> list[list[float]]:
    return [[float(v) for v in p] for p in np.asarray(points)]


def scene_to_dict(scene: Scene) -> dict:
    return {
        "version": VERSION,
        "dim": scene.dim,
        "range": scene.range.to_dict(),
        "elements": [
            {
                "class": el.cls.value,
                "closed": el.closed,
                "directed": el.directed,
                "points": _points_list(el.points),
            }
            for el in scene.elements
        ],
    }


def scene_from_dict(doc: dict) -> Scene:
    try:
        jsonschema.validate(doc, SCENE_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"invalid scene document: {exc.message}") from exc
    dim = doc["dim"]
    rng = PerceptionRange(**doc["range"])
    elements = []
    for el in doc["elements"]:
        pts = el["points"]
        if any(len(p) != dim for p in pts):
            raise FormatError(f"point arrays must all have {dim} coordinates")
        try:
            elements.append(MapElement(el["class"], pts, el["closed"], el["directed"]))
        except ValueError as exc:
            raise FormatError(str(exc)) from exc
    return Scene(tuple(elements), rng, dim)


def predictions_to_dict(preds: dict) -> dict:
    """``{scene_id: [ScoredElement, ...]}`` to a prediction document."""
    return {
        "version": VERSION,
        "scenes": {
            str(sid): [
                {"class": p.element.cls.value, "score": float(p.score), "points": _points_list(p.element.points)}
                for p in items
            ]
            for sid, items in preds.items()
        },
    }


def predictions_from_dict(doc: dict) -> dict[str, list[ScoredElement]]:
    try:
        jsonschema.validate(doc, PREDICTION_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"invalid prediction document: {exc.message}") from exc
    out: dict[str, list[ScoredElement]] = {}
    for sid, items in doc["scenes"].items():
        out[sid] = []
        for it in items:
            try:
                el = MapElement(it["class"], it["points"])
            except ValueError as exc:
                raise FormatError(str(exc)) from exc
            out[sid].append(ScoredElement(el, float(it["score"]), sid))
    return out


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def atomic_write(path, data: str | bytes) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_scene(path, scene: Scene) -> None:
    atomic_write(path, dumps(scene_to_dict(scene)))


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def load_scenes(path) -> dict[str, Scene]:
    """A scene file, or every ``*.json`` in a directory; ids are file stems."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
    else:
        files = [path]
    return {f.stem: load_scene(f) for f in files}


def save_predictions(path, preds: dict) -> None:
    atomic_write(path, dumps(predictions_to_dict(preds)))


def load_predictions(path) -> dict[str, list[ScoredElement]]:
    with open(path) as fh:
        return predictions_from_dict(json.load(fh))
