"""Point-anchored regression targets and their inverse.

Every quantity is relative to a lidar anchor point: the 2D box centre as a
pixel offset from the anchor's projection, the projected 3D centroid the same
way, and the centroid range as ``dd``, the distance along the unit centroid
ray from the anchor to the centroid. Heading is stored relative to the
centroid bearing.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .geom import (BehindCameraError, Box2D, Box3D, CameraModel, Point3, bearing, normalize_angle, project,
                   project_points)
from .raster import DepthRaster, PointCloud

log = logging.getLogger(__name__)


class ObjectClass(IntEnum):
    BACKGROUND = 0
    VEHICLE = 1
    VRU = 2
    CONSTRUCTION = 3


NUM_CLASSES = len(ObjectClass)
FOREGROUND_CLASSES = (ObjectClass.VEHICLE, ObjectClass.VRU, ObjectClass.CONSTRUCTION)


@dataclass(frozen=True)
class LinkedLabel:
    """A 2D box and a 3D box describing the same object.

    ``box2d`` is the tight image-space label; ``box2d_proj`` is the rectangle
    around the projected 3D corners, kept for the projected-3D supervision
    variant.
    """

    id: int
    cls: ObjectClass
    box2d: Box2D
    box3d: Box3D
    box2d_proj: Box2D | None = None

    def __post_init__(self):
        if self.cls == ObjectClass.BACKGROUND:
            raise ValueError("labels must carry a foreground class")
        if not self.box3d.centroid.z > 0:
            raise ValueError(f"label {self.id}: centroid behind the camera")


@dataclass(frozen=True)
class Detection:
    anchor_point_id: int
    cls: ObjectClass
    score: float
    box2d: Box2D
    box3d: Box3D


class Encoded2DTarget(NamedTuple):
    dx: float
    dy: float
    w: float
    h: float


class Encoded3DTarget(NamedTuple):
    dx: float
    dy: float
    dd: float
    cos_t: float
    sin_t: float
    w: float
    l: float
    h: float


def encode_2d(label: LinkedLabel, anchor_px, box2d: Box2D | None = None) -> Encoded2DTarget:
    b = label.box2d if box2d is None else box2d
    u, v = anchor_px
    return Encoded2DTarget(b.cx - u, b.cy - v, b.w, b.h)


def encode_3d(label: LinkedLabel, point, cam: CameraModel) -> Encoded3DTarget:
    box = label.box3d
    c = np.asarray(box.centroid, dtype=float)
    p = np.asarray(point, dtype=float)
    uc, vc, rc = project(cam, c)
    up, vp, _ = project(cam, p)
    ray = c / rc
    theta = box.phi - bearing(c)
    return Encoded3DTarget(uc - up, vc - vp, float(ray @ (c - p)),
                           math.cos(theta), math.sin(theta), box.w, box.l, box.h)


def decode_detection(anchor, anchor_px, pred2d, pred3d, score: float, cls, cam: CameraModel,
                     anchor_id: int = -1) -> Detection | None:
    """Invert the anchor-relative encoding for one foreground point.

    The centroid lies on the ray through the predicted projected-centroid
    pixel, at range ``ray . anchor + dd``. Returns ``None`` (and logs) when
    the recovered range is not positive.
    """
    u, v = anchor_px
    box2d = Box2D(u + pred2d[0], v + pred2d[1], pred2d[2], pred2d[3])
    dx, dy, dd, cos_t, sin_t, w, l, h = pred3d
    ray = cam.rays(u + dx, v + dy)
    rng = float(ray @ np.asarray(anchor, dtype=float)) + dd
    if not rng > 0:
        log.warning("anchor %d: decoded centroid range %.3f <= 0, detection dropped", anchor_id, rng)
        return None
    c = ray * rng
    phi = normalize_angle(math.atan2(sin_t, cos_t) + math.atan2(c[0], c[2]))
    box3d = Box3D(Point3(*c), w, l, h, phi)
    return Detection(int(anchor_id), ObjectClass(int(cls)), float(score), box2d, box3d)


def decode_batch(anchors: np.ndarray, anchor_uv: np.ndarray, mean2d: np.ndarray, mean3d: np.ndarray,
                 cs: np.ndarray, cam: CameraModel):
    """Vectorised decode. Returns (boxes2d (N,4 cx,cy,w,h), centroids (N,3), phi (N,), ok (N,))."""
    b2 = np.column_stack([anchor_uv + mean2d[:, :2], mean2d[:, 2:4]])
    rays = cam.rays(anchor_uv[:, 0] + mean3d[:, 0], anchor_uv[:, 1] + mean3d[:, 1])
    rng = np.einsum("ij,ij->i", rays, anchors) + mean3d[:, 2]
    cen = rays * rng[:, None]
    phi = normalize_angle(np.arctan2(cs[:, 1], cs[:, 0]) + np.arctan2(cen[:, 0], cen[:, 2]))
    return b2, cen, phi, rng > 0


def project_3d_to_2d_label(box3d: Box3D, cam: CameraModel) -> Box2D:
    """Axis-aligned rectangle around the 8 projected corners."""
    corners = box3d.corners()
    if np.any(corners[:, 2] <= 0):
        raise BehindCameraError("box corner behind the camera")
    u = cam.fx * corners[:, 0] / corners[:, 2] + cam.cx
    v = cam.fy * corners[:, 1] / corners[:, 2] + cam.cy
    return Box2D.from_corners(u.min(), v.min(), u.max(), v.max())


@dataclass
class TargetGrid:
    """Per-sentinel-pixel supervision, rows in row-major pixel order.

    Regression columns are NaN on background rows.
    ``t3d`` columns: dx, dy, dd, w, l, h. ``cs``: cos, sin of relative heading.
    """

    rows: np.ndarray
    cols: np.ndarray
    point_index: np.ndarray
    cls: np.ndarray
    label_id: np.ndarray
    t2d: np.ndarray
    t3d: np.ndarray
    cs: np.ndarray

    def __len__(self):
        return len(self.cls)

    @property
    def fg(self) -> np.ndarray:
        return self.cls != ObjectClass.BACKGROUND

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), NUM_CLASSES))
        out[np.arange(len(self)), self.cls] = 1.0
        return out

    def take(self, idx) -> "TargetGrid":
        return TargetGrid(*(getattr(self, f)[idx] for f in _GRID_FIELDS))

    @staticmethod
    def concat(grids) -> "TargetGrid":
        grids = list(grids)
        return TargetGrid(*(np.concatenate([getattr(g, f) for g in grids]) for f in _GRID_FIELDS))


_GRID_FIELDS = ("rows", "cols", "point_index", "cls", "label_id", "t2d", "t3d", "cs")


def build_target_grid(raster: DepthRaster, cloud: PointCloud, labels, cam: CameraModel,
                      box2d_source: str = "true") -> TargetGrid:
    """Supervision for every sentinel pixel of ``raster``.

    ``cloud.object_ids`` carries the point-to-label correspondences.
    ``box2d_source`` picks the 2D target: ``"true"`` for tight image labels
    (which must be expressed in ``cam`` pixels), ``"proj"`` for the rectangle
    around the 3D corners projected through ``cam``.
    """
    if box2d_source not in ("true", "proj"):
        raise ValueError(f"unknown 2D label source {box2d_source!r}")
    by_id = {lab.id: lab for lab in labels}
    if len(by_id) != len(labels):
        raise ValueError("label ids must be unique")
    tagged = cloud.object_ids >= 0
    dangling = tagged & ~np.isin(cloud.object_ids, np.fromiter(by_id, np.int64, len(by_id)))
    if dangling.any():
        k = int(np.argmax(dangling))
        raise KeyError(f"point {int(cloud.ids[k])} references unknown label {int(cloud.object_ids[k])}")
    rows, cols = raster.valid_pixels()
    pidx = raster.point_index[rows, cols]
    oid = cloud.object_ids[pidx]
    n = len(pidx)
    cls = np.zeros(n, dtype=np.int64)
    t2d = np.full((n, 4), np.nan)
    t3d = np.full((n, 6), np.nan)
    cs = np.full((n, 2), np.nan)

    fg = np.nonzero(oid >= 0)[0]
    if len(fg):
        # same arithmetic as encode_2d / encode_3d, vectorised through a per-label table
        labs = sorted(labels, key=lambda lab: lab.id)
        lab_ids = np.array([lab.id for lab in labs], dtype=np.int64)
        b2s = [lab.box2d if box2d_source == "true" else project_3d_to_2d_label(lab.box3d, cam) for lab in labs]
        tab_b2 = np.array([(b.cx, b.cy, b.w, b.h) for b in b2s], dtype=float)
        tab_c = np.array([lab.box3d.centroid for lab in labs], dtype=float)
        tab_phi = np.array([lab.box3d.phi for lab in labs], dtype=float)
        tab_ext = np.array([(lab.box3d.w, lab.box3d.l, lab.box3d.h) for lab in labs], dtype=float)
        tab_cls = np.array([int(lab.cls) for lab in labs], dtype=np.int64)
        k = np.searchsorted(lab_ids, oid[fg])
        p = cloud.positions[pidx[fg]]
        c = tab_c[k]
        uv_p, _, ok_p = project_points(cam, p)
        uv_c, rc, _ = project_points(cam, c)
        if not ok_p.all():
            raise BehindCameraError("anchor point behind the camera")
        ray = c / rc[:, None]
        theta = tab_phi[k] - np.arctan2(c[:, 0], c[:, 2])
        cls[fg] = tab_cls[k]
        t2d[fg] = np.column_stack([tab_b2[k, :2] - uv_p, tab_b2[k, 2:]])
        t3d[fg] = np.column_stack([uv_c - uv_p, np.einsum("ij,ij->i", ray, c - p), tab_ext[k]])
        cs[fg] = np.column_stack([np.cos(theta), np.sin(theta)])
    return TargetGrid(rows.astype(np.int64), cols.astype(np.int64), pidx.astype(np.int64), cls,
                      oid.astype(np.int64), t2d, t3d, cs)
