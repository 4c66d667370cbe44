"""JSON-lines records for detections and target grids, plus atomic file writes.

Every file starts with a header record carrying ``schema`` and ``version``.

Detection record fields: ``scene_id``, ``anchor_point_id`` (source point id),
``class`` (``vehicle``/``vru``/``construction``), ``score`` in [0, 1],
``box2d`` as ``[cx, cy, w, h]`` in pixels of the scene camera, ``box3d`` with
``centroid`` ``[x, y, z]`` in metres (camera frame: x right, y down, z
forward), ``w``/``l``/``h`` in metres and heading ``phi`` in radians.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geom import Box2D
from .synth import CLASS_BY_NAME, CLASS_NAMES, box3d_from_json, box3d_to_json
from .targets import Detection, ObjectClass, TargetGrid

DETECTIONS_SCHEMA = "anchordet.detections"
TARGETS_SCHEMA = "anchordet.targets"
FORMAT_VERSION = 1


class RecordError(ValueError):
    pass


def atomic_write(path, data: str | bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(rec) -> str:
    return json.dumps(rec, separators=(",", ":"))


def detection_to_json(scene_id: int, d: Detection) -> dict:
    b = d.box2d
    return {"type": "detection", "scene_id": scene_id, "anchor_point_id": d.anchor_point_id,
            "class": CLASS_NAMES[d.cls], "score": d.score, "box2d": [b.cx, b.cy, b.w, b.h],
            "box3d": box3d_to_json(d.box3d)}


def detection_from_json(rec) -> tuple[int, Detection]:
    cls = CLASS_BY_NAME[rec["class"]]
    if cls == ObjectClass.BACKGROUND:
        raise ValueError("detections cannot be background")
    score = float(rec["score"])
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score {score} outside [0, 1]")
    return int(rec["scene_id"]), Detection(int(rec["anchor_point_id"]), cls, score, Box2D(*rec["box2d"]),
                                           box3d_from_json(rec["box3d"]))


def dumps_detections(per_scene: dict, meta: dict | None = None) -> str:
    """``per_scene`` maps scene id to its detection list; every scene gets a frame record."""
    lines = [_dumps({"type": "header", "schema": DETECTIONS_SCHEMA, "version": FORMAT_VERSION,
                     "meta": meta or {}})]
    for sid in sorted(per_scene):
        lines.append(_dumps({"type": "frame", "scene_id": sid, "n_detections": len(per_scene[sid])}))
        lines.extend(_dumps(detection_to_json(sid, d)) for d in per_scene[sid])
    return "\n".join(lines) + "\n"


def _iter_records(path, schema: str):
    with open(path) as f:
        first = True
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(f"{where}: invalid JSON ({e})") from e
            if not isinstance(rec, dict):
                raise RecordError(f"{where}: record is not an object")
            if first:
                if rec.get("type") != "header" or rec.get("schema") != schema:
                    raise RecordError(f"{where}: expected a {schema} header record")
                if rec.get("version") != FORMAT_VERSION:
                    raise RecordError(f"{where}: unsupported {schema} version {rec.get('version')!r}")
                first = False
                continue
            yield where, rec
        if first:
            raise RecordError(f"{path}: empty file, expected a {schema} header")


def load_detections(path) -> dict:
    """Scene id -> detection list. Errors carry ``path:line``."""
    out = {}
    for where, rec in _iter_records(path, DETECTIONS_SCHEMA):
        kind = rec.get("type")
        try:
            if kind == "frame":
                out.setdefault(int(rec["scene_id"]), [])
            elif kind == "detection":
                sid, det = detection_from_json(rec)
                out.setdefault(sid, []).append(det)
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (KeyError, TypeError, ValueError) as e:
            raise RecordError(f"{where}: malformed {kind} record ({type(e).__name__}: {e})") from e
    return out


def _nan_list(a: np.ndarray):
    return None if np.isnan(a).any() else a.tolist()


def dumps_targets(grids: dict, meta: dict | None = None) -> str:
    """One ``pixel`` record per sentinel pixel; regression fields are null on background."""
    lines = [_dumps({"type": "header", "schema": TARGETS_SCHEMA, "version": FORMAT_VERSION, "meta": meta or {}})]
    for sid in sorted(grids):
        g: TargetGrid = grids[sid]
        lines.append(_dumps({"type": "frame", "scene_id": sid, "n_pixels": len(g), "n_foreground": int(g.fg.sum())}))
        for k in range(len(g)):
            lines.append(_dumps({"type": "pixel", "scene_id": sid, "row": int(g.rows[k]), "col": int(g.cols[k]),
                                 "point_index": int(g.point_index[k]), "class": CLASS_NAMES[ObjectClass(int(g.cls[k]))],
                                 "label_id": int(g.label_id[k]), "t2d": _nan_list(g.t2d[k]),
                                 "t3d": _nan_list(g.t3d[k]), "cs": _nan_list(g.cs[k])}))
    return "\n".join(lines) + "\n"


def targets_report(sid: int, g: TargetGrid, all_pixels: bool = False) -> str:
    """Fixed-width text table of a target grid; background rows only with ``all_pixels``."""
    lines = [f"scene {sid}: {len(g)} sentinel pixels, {int(g.fg.sum())} foreground",
             f"{'row':>4} {'col':>4} {'class':<12} {'label':>5} {'dx2d':>8} {'dy2d':>8} {'w2d':>7} {'h2d':>7} "
             f"{'dx3d':>8} {'dy3d':>8} {'dd':>7} {'w':>5} {'l':>5} {'h':>5} {'cos':>6} {'sin':>6}"]
    for k in range(len(g)):
        fg = g.cls[k] != ObjectClass.BACKGROUND
        if not (fg or all_pixels):
            continue
        head = f"{g.rows[k]:>4} {g.cols[k]:>4} {CLASS_NAMES[ObjectClass(int(g.cls[k]))]:<12} {g.label_id[k]:>5}"
        if fg:
            t2, t3, cs = g.t2d[k], g.t3d[k], g.cs[k]
            lines.append(f"{head} {t2[0]:8.2f} {t2[1]:8.2f} {t2[2]:7.2f} {t2[3]:7.2f} "
                         f"{t3[0]:8.2f} {t3[1]:8.2f} {t3[2]:7.3f} {t3[3]:5.2f} {t3[4]:5.2f} {t3[5]:5.2f} "
                         f"{cs[0]:6.3f} {cs[1]:6.3f}")
        else:
            lines.append(head)
    return "\n".join(lines) + "\n"
