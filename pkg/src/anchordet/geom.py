"""Camera frame geometry: pinhole projection, bearings and box overlap.

Camera frame convention: z forward, x right, y down. Headings live in the
horizontal x-z plane, zero along +z and positive toward +x, the same
convention as :func:`bearing`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi
_CLIP_EPS = 1e-12


class BehindCameraError(ValueError):
    """Raised when a point that must be projected has z <= 0."""


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_hfov(cls, width: int, height: int, hfov_deg: float = 30.0) -> "CameraModel":
        """Square-pixel camera centred on the image with the given horizontal FOV."""
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def scaled(self, factor: int) -> "CameraModel":
        """Same optics sampled at ``factor`` times the pixel density.

        Pixel coordinates of every point scale by exactly ``factor``.
        """
        return CameraModel(self.fx * factor, self.fy * factor, self.cx * factor,
                           self.cy * factor, self.width * factor, self.height * factor)

    def rays(self, u, v) -> np.ndarray:
        """Unit viewing rays through (possibly fractional) pixel coordinates."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


def project(cam: CameraModel, p) -> tuple[float, float, float]:
    """Project a camera-frame point to ``(u, v, range)``.

    ``range`` is the Euclidean distance from the camera centre, not depth.
    """
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise BehindCameraError(f"point {tuple(p)} is not in front of the camera")
    return (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, math.sqrt(x * x + y * y + z * z))


def project_points(cam: CameraModel, pts: np.ndarray):
    """Vectorised :func:`project`.

    Returns ``(uv, rng, in_front)``; rows with ``in_front == False`` have
    undefined ``uv`` and must be discarded by the caller.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    z = pts[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    uv = np.empty((len(pts), 2))
    uv[:, 0] = cam.fx * pts[:, 0] / safe_z + cam.cx
    uv[:, 1] = cam.fy * pts[:, 1] / safe_z + cam.cy
    return uv, np.linalg.norm(pts, axis=1), in_front


def unproject(cam: CameraModel, u: float, v: float, rng: float) -> Point3:
    """Point at Euclidean distance ``rng`` along the ray through pixel (u, v)."""
    r = cam.rays(u, v)
    return Point3(*(float(c) for c in r * rng))


def bearing(p) -> float:
    """Azimuth of ``p`` in the x-z plane, 0 on the optical axis, positive toward +x."""
    x, _, z = (float(c) for c in p)
    if x == 0.0 and z == 0.0:
        raise ValueError("bearing undefined for a point on the vertical axis")
    return math.atan2(x, z)


def normalize_angle(a):
    """Wrap angles to (-pi, pi]. Works on scalars and arrays."""
    if np.ndim(a) == 0:
        r = math.fmod(float(a) + math.pi, TWO_PI)
        if r <= 0.0:
            r += TWO_PI
        return r - math.pi
    r = np.fmod(np.asarray(a, dtype=float) + math.pi, TWO_PI)
    r = np.where(r <= 0.0, r + TWO_PI, r)
    return r - math.pi


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box given by centre and extent in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box2D":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, other: "Box2D", tol: float = 1e-9) -> bool:
        a, b = self.corners, other.corners
        return (a[0] <= b[0] + tol and a[1] <= b[1] + tol
                and a[2] >= b[2] - tol and a[3] >= b[3] - tol)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: centroid, width/length/height in metres, heading ``phi``.

    ``l`` runs along the heading direction ``(sin phi, 0, cos phi)``; ``w`` is
    the lateral extent; ``h`` is vertical.
    """

    centroid: Point3
    w: float
    l: float
    h: float
    phi: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "centroid", Point3(*(float(c) for c in self.centroid)))
        object.__setattr__(self, "phi", normalize_angle(self.phi))

    @property
    def range(self) -> float:
        return math.sqrt(sum(c * c for c in self.centroid))

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit heading and lateral directions in camera-frame 3D."""
        s, c = math.sin(self.phi), math.cos(self.phi)
        return np.array([s, 0.0, c]), np.array([c, 0.0, -s])

    def footprint(self) -> np.ndarray:
        """Counter-clockwise (x, z) corners of the top-down rectangle, shape (4, 2)."""
        return rect_corners(self.centroid.x, self.centroid.z, self.w, self.l, self.phi)

    def corners(self) -> np.ndarray:
        """The 8 corners in camera frame, shape (8, 3)."""
        fwd, lat = self.axes()
        c = np.asarray(self.centroid)
        out = []
        for sy in (-1, 1):
            for sl in (-1, 1):
                for sw in (-1, 1):
                    out.append(c + sl * self.l / 2 * fwd + sw * self.w / 2 * lat
                               + np.array([0.0, sy * self.h / 2, 0.0]))
        return np.array(out)


def rect_corners(cx: float, cz: float, w: float, l: float, phi: float) -> np.ndarray:
    s, c = math.sin(phi), math.cos(phi)
    fwd = np.array([s, c])
    lat = np.array([c, -s])
    ctr = np.array([cx, cz])
    pts = np.array([ctr + l / 2 * fwd + w / 2 * lat,
                    ctr + l / 2 * fwd - w / 2 * lat,
                    ctr - l / 2 * fwd - w / 2 * lat,
                    ctr - l / 2 * fwd + w / 2 * lat])
    if polygon_area(pts) < 0:
        pts = pts[::-1].copy()
    return pts


def _shoelace(pts) -> float:
    n = len(pts)
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i - 1]
        x1, y1 = pts[i]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def polygon_area(pts) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    if len(pts) < 3:
        return 0.0
    return _shoelace(np.asarray(pts, dtype=float).tolist())


def _clip(subject: list, clip: list) -> list:
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        for j in range(len(inp)):
            px, py = inp[j - 1]
            qx, qy = inp[j]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sq >= -_CLIP_EPS:
                if sp < -_CLIP_EPS:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif sp >= -_CLIP_EPS:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip polygon ``subject`` against counter-clockwise convex polygon ``clip``."""
    out = _clip([tuple(p) for p in np.asarray(subject, dtype=float).tolist()],
                np.asarray(clip, dtype=float).tolist())
    return np.array(out, dtype=float).reshape(-1, 2)


def iou_2d(a: Box2D, b: Box2D) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_2d_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of one ``(x1, y1, x2, y2)`` row against an (N, 4) array."""
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (box[2] - box[0]) * (box[3] - box[1])
    area_b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area_a + area_b - inter)


def footprints(cx: np.ndarray, cz: np.ndarray, w: np.ndarray, l: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rect_corners`: (N, 4, 2) counter-clockwise (x, z) rectangles."""
    s, c = np.sin(phi), np.cos(phi)
    ax = np.stack([s, c], axis=-1) * (l / 2)[:, None]
    lat = np.stack([c, -s], axis=-1) * (w / 2)[:, None]
    ctr = np.stack([cx, cz], axis=-1)
    return np.stack([ctr + ax + lat, ctr + ax - lat, ctr - ax - lat, ctr - ax + lat], axis=1)


def iou_footprints(fa: np.ndarray, fb: np.ndarray) -> float:
    """IoU of two counter-clockwise convex polygons."""
    la = np.asarray(fa, dtype=float).tolist()
    lb = np.asarray(fb, dtype=float).tolist()
    area_a = _shoelace(la) if len(la) >= 3 else 0.0
    area_b = _shoelace(lb) if len(lb) >= 3 else 0.0
    if area_a <= _CLIP_EPS or area_b <= _CLIP_EPS:
        return 0.0
    inter = _clip([tuple(p) for p in la], lb)
    ia = _shoelace(inter) if len(inter) >= 3 else 0.0
    if ia <= _CLIP_EPS:
        return 0.0
    return min(1.0, ia / (area_a + area_b - ia))


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Top-down IoU of the rotated w x l footprints."""
    ca, cb = a.centroid, b.centroid
    reach = 0.5 * (math.hypot(a.w, a.l) + math.hypot(b.w, b.l))
    if math.hypot(ca.x - cb.x, ca.z - cb.z) >= reach:
        return 0.0
    return iou_footprints(a.footprint(), b.footprint())
