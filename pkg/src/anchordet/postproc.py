"""Turn per-pixel predictions into final detections.

Foreground query on the class heatmap, 2D decode, 2D NMS, 3D decode, BEV
NMS. Either NMS stage can be switched off for ablations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import (Box2D, Box3D, CameraModel, Point3, footprints, iou_footprints,
                   project_points)
from .loss import PredictionGrid
from .raster import DepthRaster, PointCloud
from .targets import Detection, ObjectClass, decode_batch

NMS_MODES = ("2d", "3d", "both", "none")


@dataclass(frozen=True)
class PostprocConfig:
    score_threshold: float = 0.3
    nms: str = "both"
    iou_2d: float = 0.5
    iou_bev: float = 0.2

    def __post_init__(self):
        if self.nms not in NMS_MODES:
            raise ValueError(f"nms must be one of {NMS_MODES}, got {self.nms!r}")
        for name in ("iou_2d", "iou_bev"):
            _check_thresh(getattr(self, name))


def _check_thresh(t: float) -> None:
    if not 0 < t <= 1:
        raise ValueError(f"IoU threshold must be in (0, 1], got {t}")


@dataclass
class Candidates:
    """Foreground pixels, as indices into the prediction rows."""

    rows: np.ndarray
    cls: np.ndarray
    score: np.ndarray


def select_foreground(pred: PredictionGrid, threshold: float = 0.3) -> Candidates:
    """Rows whose best non-background class has probability >= ``threshold``.

    Rows whose overall argmax is background are never selected.
    """
    probs = pred.probs
    fg_cls = 1 + np.argmax(probs[:, 1:], axis=1)
    fg_score = probs[np.arange(len(probs)), fg_cls]
    keep = (np.argmax(probs, axis=1) != ObjectClass.BACKGROUND) & (fg_score >= threshold)
    idx = np.nonzero(keep)[0]
    return Candidates(idx, fg_cls[idx], fg_score[idx])


def _score_order(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Descending score, ties to the lower anchor id."""
    return np.lexsort((ids, -scores))


def overlapping_pairs(boxes: np.ndarray, iou_thresh: float) -> tuple[np.ndarray, np.ndarray]:
    """All pairs ``i < j`` (in input index order) with ``iou >= iou_thresh``.

    Candidates are swept in x so only boxes whose x-intervals can meet are
    compared; cost follows the number of overlapping pairs, not N squared.
    """
    n = len(boxes)
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(boxes[:, 0], kind="stable")
    x1 = boxes[order, 0]
    hi = np.searchsorted(x1, boxes[order, 2], side="left")
    start = np.arange(n) + 1
    counts = np.maximum(hi - start, 0)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    a = np.repeat(np.arange(n), counts)
    offs = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    b = start[a] + offs
    ia, ib = order[a], order[b]
    bx, by = boxes[ia], boxes[ib]
    iw = np.minimum(bx[:, 2], by[:, 2]) - np.maximum(bx[:, 0], by[:, 0])
    ih = np.minimum(bx[:, 3], by[:, 3]) - np.maximum(bx[:, 1], by[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    area_b = (by[:, 2] - by[:, 0]) * (by[:, 3] - by[:, 1])
    hit = inter / (area_a + area_b - inter) >= iou_thresh
    ia, ib = ia[hit], ib[hit]
    return np.minimum(ia, ib), np.maximum(ia, ib)


def _greedy_from_pairs(order: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Greedy suppression given every pair ``(a, b)`` that overlaps past the threshold."""
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    # orient each pair from the better-ranked box to the one it may suppress
    first = rank[a] < rank[b]
    hi = np.where(first, a, b)
    lo = np.where(first, b, a)
    by_hi = np.argsort(hi, kind="stable")
    hi, lo = hi[by_hi], lo[by_hi]
    bounds = np.searchsorted(hi, np.arange(len(order) + 1)).tolist()
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in order.tolist():
        if alive[i]:
            keep.append(i)
            if bounds[i + 1] > bounds[i]:
                alive[lo[bounds[i]:bounds[i + 1]]] = False
    return np.array(keep, dtype=np.int64)


def greedy_nms_2d(boxes: np.ndarray, scores: np.ndarray, ids: np.ndarray, cls: np.ndarray,
                  iou_thresh: float = 0.5) -> np.ndarray:
    """Indices kept by per-class greedy NMS on (x1, y1, x2, y2) rows, in score order."""
    _check_thresh(iou_thresh)
    a, b = overlapping_pairs(boxes, iou_thresh)
    same = cls[a] == cls[b]
    return _greedy_from_pairs(_score_order(scores, ids), a[same], b[same])


def greedy_nms_bev(fps: np.ndarray, reach: np.ndarray, scores: np.ndarray, ids: np.ndarray,
                   cls: np.ndarray, iou_thresh: float = 0.2) -> np.ndarray:
    """Per-class greedy NMS on (N, 4, 2) footprints; ``reach`` is each half-diagonal."""
    _check_thresh(iou_thresh)
    ctr = fps.mean(axis=1)
    dist = np.hypot(ctr[:, None, 0] - ctr[None, :, 0], ctr[:, None, 1] - ctr[None, :, 1])
    near = (dist < reach[:, None] + reach[None, :]) & (cls[:, None] == cls[None, :])
    a, b = np.nonzero(np.triu(near, 1))
    hit = np.array([iou_footprints(fps[i], fps[j]) >= iou_thresh for i, j in zip(a.tolist(), b.tolist())],
                   dtype=bool).reshape(-1)
    return _greedy_from_pairs(_score_order(scores, ids), a[hit], b[hit])


def _det_arrays(dets):
    scores = np.array([d.score for d in dets], dtype=float)
    ids = np.array([d.anchor_point_id for d in dets], dtype=np.int64)
    cls = np.array([int(d.cls) for d in dets], dtype=np.int64)
    return scores, ids, cls


def nms_2d(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class NMS on image boxes; output in descending score order.

    Equal scores are broken by the lower anchor id.
    """
    if not dets:
        return []
    boxes = np.array([d.box2d.corners for d in dets])
    return [dets[i] for i in greedy_nms_2d(boxes, *_det_arrays(dets), iou_thresh)]


def nms_bev(dets: list[Detection], iou_thresh: float = 0.2) -> list[Detection]:
    """Greedy per-class NMS on rotated top-down footprints, same ordering rules as :func:`nms_2d`."""
    if not dets:
        return []
    fps = np.array([d.box3d.footprint() for d in dets])
    reach = np.array([math.hypot(d.box3d.w, d.box3d.l) / 2 for d in dets])
    return [dets[i] for i in greedy_nms_bev(fps, reach, *_det_arrays(dets), iou_thresh)]


def run_postprocess(pred: PredictionGrid, point_index: np.ndarray, cloud: PointCloud, cam: CameraModel,
                    cfg: PostprocConfig = PostprocConfig()) -> list[Detection]:
    """Foreground query, 2D decode, 2D NMS, 3D decode, BEV NMS.

    ``point_index[i]`` is the cloud row anchoring prediction row ``i``.
    Candidates whose decoded boxes are degenerate (non-positive extents or
    centroid range) are dropped at the stage that decodes them. Everything
    stays in arrays until the survivors are wrapped as detections.
    """
    cand = select_foreground(pred, cfg.score_threshold)
    if len(cand.rows) == 0:
        return []
    rows = cand.rows
    anchors = cloud.positions[point_index[rows]]
    ids = cloud.ids[point_index[rows]]
    uv, _, _ = project_points(cam, anchors)
    mean2d = pred.mean2d[rows]
    b2 = np.column_stack([uv + mean2d[:, :2], mean2d[:, 2:4]])
    sel = np.nonzero((b2[:, 2] > 0) & (b2[:, 3] > 0))[0]
    if cfg.nms in ("2d", "both") and len(sel):
        xyxy = np.column_stack([b2[sel, :2] - b2[sel, 2:] / 2, b2[sel, :2] + b2[sel, 2:] / 2])
        sel = sel[greedy_nms_2d(xyxy, cand.score[sel], ids[sel], cand.cls[sel], cfg.iou_2d)]

    mean3d = pred.mean3d[rows[sel]]
    _, cen, phi, ok = decode_batch(anchors[sel], uv[sel], mean2d[sel], mean3d, pred.cs[rows[sel]], cam)
    ok &= np.all(mean3d[:, 3:6] > 0, axis=1) & (cen[:, 2] > 0)
    sel, cen, phi, ext = sel[ok], cen[ok], phi[ok], mean3d[ok, 3:6]
    if cfg.nms in ("3d", "both") and len(sel):
        fps = footprints(cen[:, 0], cen[:, 2], ext[:, 0], ext[:, 1], phi)
        reach = np.hypot(ext[:, 0], ext[:, 1]) / 2
        k = greedy_nms_bev(fps, reach, cand.score[sel], ids[sel], cand.cls[sel], cfg.iou_bev)
        sel, cen, phi, ext = sel[k], cen[k], phi[k], ext[k]
    else:
        k = _score_order(cand.score[sel], ids[sel])
        sel, cen, phi, ext = sel[k], cen[k], phi[k], ext[k]
    return [Detection(i, ObjectClass(c), sc, Box2D(*bb), Box3D(Point3(*ce), *e, p))
            for i, c, sc, bb, ce, e, p in zip(ids[sel].tolist(), cand.cls[sel].tolist(), cand.score[sel].tolist(),
                                             b2[sel].tolist(), cen.tolist(), ext.tolist(), phi.tolist())]


def postprocess_raster(pred: PredictionGrid, raster: DepthRaster, rows: np.ndarray, cols: np.ndarray,
                       cloud: PointCloud, cam: CameraModel, cfg: PostprocConfig = PostprocConfig()):
    """Same as :func:`run_postprocess` with anchors looked up through the raster."""
    return run_postprocess(pred, raster.point_index[rows, cols], cloud, cam, cfg)
