"""Sparse depth rasters built from lidar, plus the 2MP to 8MP transfer helpers."""
from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import CameraModel, Point3, project_points

# (width, height) of the half-resolution depth raster for each image configuration
RASTER_2MP = (790, 160)
RASTER_8MP = (1580, 320)
TRAIN_DROPOUT = 0.5
TRANSFER_RANGE_FACTOR = 0.5

_RASTER_HEADER = struct.Struct("<II")


@dataclass
class LidarPoint:
    position: Point3
    object_id: int | None = None


@dataclass
class PointCloud:
    """Columnar lidar sweep in camera frame.

    ``object_ids`` holds the label id each point belongs to, -1 for none.
    ``ids`` are stable source ids that survive dropout and are reported as
    detection anchors. ``appearance`` holds the synthetic image signature
    sampled at each point's pixel.
    """

    positions: np.ndarray
    object_ids: np.ndarray
    ids: np.ndarray = None
    appearance: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.object_ids = np.asarray(self.object_ids, dtype=np.int64).reshape(-1)
        if self.ids is None:
            self.ids = np.arange(len(self.positions), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if len(self.object_ids) != len(self.positions) or len(self.ids) != len(self.positions):
            raise ValueError("point cloud columns have mismatched lengths")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_points(cls, points: list[LidarPoint]) -> "PointCloud":
        pos = np.array([tuple(p.position) for p in points], dtype=float).reshape(-1, 3)
        oid = [(-1 if p.object_id is None else p.object_id) for p in points]
        return cls(pos, np.array(oid, dtype=np.int64))

    def subset(self, mask) -> "PointCloud":
        app = None if self.appearance is None else self.appearance[mask]
        return PointCloud(self.positions[mask], self.object_ids[mask], self.ids[mask], app)


@dataclass
class RasterStats:
    projected: int = 0
    behind: int = 0
    out_of_view: int = 0
    suppressed: int = 0

    @property
    def suppressed_fraction(self) -> float:
        return self.suppressed / self.projected if self.projected else 0.0


@dataclass
class DepthRaster:
    """Two-channel sparse depth image with a back-pointer to the source point."""

    width: int
    height: int
    range_ch: np.ndarray
    sentinel_ch: np.ndarray
    point_index: np.ndarray
    stats: RasterStats = field(default_factory=RasterStats)

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthRaster":
        return cls(width, height, np.zeros((height, width)), np.zeros((height, width), np.uint8),
                   np.full((height, width), -1, np.int64))

    def valid_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (rows, cols) of all sentinel pixels."""
        return np.nonzero(self.sentinel_ch)

    def check(self) -> None:
        occupied = self.sentinel_ch == 1
        if not (np.array_equal(occupied, self.range_ch > 0) and np.array_equal(occupied, self.point_index >= 0)):
            raise AssertionError("sentinel channel is not the support of the range channel")


def build_depth_raster(cloud: PointCloud, cam: CameraModel, out_w: int, out_h: int,
                       mode: str = "sequential") -> DepthRaster:
    """Z-buffered projection of ``cloud`` into an ``out_w`` x ``out_h`` raster.

    Image coordinates are scaled by ``out_w / cam.width`` and ``out_h /
    cam.height``. Per pixel the minimum-range point wins; equal ranges go to
    the lower point index. Points behind the camera or outside the image are
    dropped and counted in ``raster.stats``.

    ``mode="sequential"`` runs the plain per-point loop; ``"vectorized"``
    sorts once. Both give identical rasters.
    """
    if out_w <= 0 or out_h <= 0:
        raise ValueError("raster dimensions must be positive")
    uv, rng, in_front = project_points(cam, cloud.positions)
    col = np.floor(uv[:, 0] * (out_w / cam.width))
    row = np.floor(uv[:, 1] * (out_h / cam.height))
    inside = in_front & (col >= 0) & (col < out_w) & (row >= 0) & (row < out_h)
    stats = RasterStats(projected=int(inside.sum()), behind=int((~in_front).sum()),
                        out_of_view=int((in_front & ~inside).sum()))
    raster = DepthRaster.empty(out_w, out_h)
    idx = np.nonzero(inside)[0]
    pix = row[idx].astype(np.int64) * out_w + col[idx].astype(np.int64)

    if mode == "sequential":
        best = {}
        for k, p in zip(idx.tolist(), pix.tolist()):
            cur = best.get(p)
            if cur is None or rng[k] < rng[cur]:
                best[p] = k
        winners = np.array(sorted(best.values()), dtype=np.int64)
        win_pix = (row[winners] * out_w + col[winners]).astype(np.int64)
    elif mode == "vectorized":
        order = np.lexsort((idx, rng[idx], pix))
        spix = pix[order]
        first = np.ones(len(spix), dtype=bool)
        first[1:] = spix[1:] != spix[:-1]
        winners = idx[order][first]
        win_pix = spix[first]
    else:
        raise ValueError(f"unknown z-buffer mode {mode!r}")

    stats.suppressed = stats.projected - len(winners)
    flat_r = raster.range_ch.reshape(-1)
    flat_r[win_pix] = rng[winners]
    raster.sentinel_ch.reshape(-1)[win_pix] = 1
    raster.point_index.reshape(-1)[win_pix] = winners
    raster.stats = stats
    return raster


def resize_nearest(r: DepthRaster, out_w: int, out_h: int) -> DepthRaster:
    """Nearest-neighbour resample; output pixel j reads source ``j * W // out_w``."""
    if out_w <= 0 or out_h <= 0:
        raise ValueError("target dimensions must be positive")
    src_c = (np.arange(out_w) * r.width) // out_w
    src_r = (np.arange(out_h) * r.height) // out_h
    sel = np.ix_(src_r, src_c)
    return DepthRaster(out_w, out_h, r.range_ch[sel].copy(), r.sentinel_ch[sel].copy(),
                       r.point_index[sel].copy(), dataclasses.replace(r.stats))


def dropout_points(cloud: PointCloud, p: float = TRAIN_DROPOUT, seed=0) -> PointCloud:
    """Keep each point independently with probability ``1 - p``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0.0:
        return cloud.subset(np.ones(len(cloud), dtype=bool))
    keep = np.random.default_rng(seed).random(len(cloud)) >= p
    return cloud.subset(keep)


def rescale_ranges(obj, factor: float):
    """Scale every range radially by ``factor``; pixels and bearings are unchanged."""
    if not factor > 0:
        raise ValueError("range factor must be positive")
    if isinstance(obj, PointCloud):
        app = None if obj.appearance is None else obj.appearance.copy()
        return PointCloud(obj.positions * factor, obj.object_ids.copy(), obj.ids.copy(), app)
    if isinstance(obj, DepthRaster):
        return DepthRaster(obj.width, obj.height, obj.range_ch * factor, obj.sentinel_ch.copy(),
                           obj.point_index.copy(), dataclasses.replace(obj.stats))
    raise TypeError(f"cannot rescale {type(obj).__name__}")


def undo_rescale(det, factor: float):
    """Map a detection made on range-rescaled lidar back to true range.

    Only the centroid moves; extents are regressed in metres and the 2D box
    lives in pixels, so both stay as predicted.
    """
    if not factor > 0:
        raise ValueError("range factor must be positive")
    box = det.box3d
    c = Point3(*(v / factor for v in box.centroid))
    return dataclasses.replace(det, box3d=dataclasses.replace(box, centroid=c))


def write_raster(path, r: DepthRaster) -> None:
    """Little-endian dump: (width, height) u32 header, f32 ranges, u8 sentinels."""
    with open(path, "wb") as f:
        f.write(_RASTER_HEADER.pack(r.width, r.height))
        f.write(r.range_ch.astype("<f4").tobytes())
        f.write(r.sentinel_ch.astype(np.uint8).tobytes())


def read_raster(path) -> DepthRaster:
    """Inverse of :func:`write_raster`.

    Back-pointers are not part of the dump; occupied pixels get their own
    flat pixel index as a placeholder so the raster stays self-consistent.
    """
    data = Path(path).read_bytes()
    w, h = _RASTER_HEADER.unpack_from(data, 0)
    off = _RASTER_HEADER.size
    n = w * h
    if len(data) != off + 5 * n:
        raise ValueError(f"{path}: expected {off + 5 * n} bytes, found {len(data)}")
    rng = np.frombuffer(data, "<f4", n, off).astype(float).reshape(h, w)
    sen = np.frombuffer(data, np.uint8, n, off + 4 * n).reshape(h, w).copy()
    idx = np.where(sen == 1, np.arange(n).reshape(h, w), -1).astype(np.int64)
    return DepthRaster(w, h, rng, sen, idx)
