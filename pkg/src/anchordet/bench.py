"""Runtime scaling with operating range: range view vs a BEV grid workload.

The range-view side times the detector pipeline (rasterise, encode the
raster into per-pixel predictions with the head, decode, NMS) on scenes whose
object density per unit ground area is held fixed, so farther max ranges mean
more objects. An oracle mode swaps the head for target encoding and perfect
predictions.

The BEV side is a workload mock, not a detector. It allocates a metric grid
over the camera wedge (width ``2 r tan(hfov/2)``, depth ``r``, fixed cell
size), scatters the lidar into it and sweeps a 3x3 box filter over every
cell. It isolates how the data structure grows with range and nothing else.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .geom import CameraModel
from .head import HeadParams, OptimConfig, extract_all_features, forward
from .loss import oracle_predictions
from .pipeline import train_head
from .postproc import PostprocConfig, run_postprocess
from .raster import RASTER_2MP, PointCloud, build_depth_raster
from .synth import SceneConfig, generate_scene
from .targets import build_target_grid

BEV_CELL = 0.2
NEAR_RANGE = 60.0           # closest range at which a whole vehicle fits in the image
OBJECTS_PER_M2 = 1.0 / 1000.0
CSV_FIELDS = ("range_m", "rv_time_s", "bev_mock_time_s", "bev_cell_count", "n_objects", "n_points")


@dataclass
class BenchRow:
    range_m: float
    rv_time: float
    bev_mock_time: float
    bev_cell_count: int
    n_objects: int
    n_points: int


def bev_grid_shape(max_range: float, hfov_deg: float = 30.0, cell: float = BEV_CELL) -> tuple[int, int]:
    """(depth cells, lateral cells) of a grid covering the wedge out to ``max_range``."""
    depth = math.ceil(max_range / cell - 1e-9)
    half = math.ceil(max_range * math.tan(math.radians(hfov_deg) / 2) / cell - 1e-9)
    return depth, 2 * half


def bev_cell_count(max_range: float, hfov_deg: float = 30.0, cell: float = BEV_CELL) -> int:
    d, w = bev_grid_shape(max_range, hfov_deg, cell)
    return d * w


def bev_mock(cloud: PointCloud, max_range: float, hfov_deg: float = 30.0, cell: float = BEV_CELL) -> float:
    """Allocate the grid, scatter points, run a 3x3 box filter. Returns the peak cell."""
    depth, width = bev_grid_shape(max_range, hfov_deg, cell)
    x, z = cloud.positions[:, 0], cloud.positions[:, 2]
    iz = np.floor(z / cell).astype(np.int64)
    ix = np.floor(x / cell).astype(np.int64) + width // 2
    ok = (iz >= 0) & (iz < depth) & (ix >= 0) & (ix < width)
    grid = np.bincount(iz[ok] * width + ix[ok], minlength=depth * width).astype(np.float32)
    grid = np.pad(grid.reshape(depth, width), 1)
    out = np.zeros((depth, width), dtype=np.float32)
    for dr in range(3):
        for dc in range(3):
            out += grid[dr:dr + depth, dc:dc + width]
    return float(out.max())


def wedge_area(r0: float, r1: float, hfov_deg: float = 30.0) -> float:
    """Ground area of the camera wedge between two forward distances."""
    return math.tan(math.radians(hfov_deg) / 2) * (r1 * r1 - r0 * r0)


def density_scene_config(max_range: float, seed: int = 0, density: float = OBJECTS_PER_M2) -> SceneConfig:
    """Objects spread over [NEAR_RANGE, max_range] at a fixed count per square metre."""
    n = max(1, round(density * wedge_area(NEAR_RANGE, max_range)))
    n_veh = (n + 1) // 2
    n_vru = (n - n_veh + 1) // 2
    return SceneConfig(seed=seed, n_vehicle=n_veh, n_vru=n_vru, n_construction=n - n_veh - n_vru,
                       range_min=NEAR_RANGE, range_max=float(max_range), range_sampling="area")


def rv_pipeline(cloud: PointCloud, labels, cam: CameraModel, params: HeadParams | None = None,
                raster_size=RASTER_2MP, post: PostprocConfig = PostprocConfig()):
    """Rasterise, predict per pixel, decode, run both NMS stages.

    With ``params=None`` the predictions are the encoded targets themselves.
    """
    raster = build_depth_raster(cloud, cam, *raster_size)
    if params is None:
        targets = build_target_grid(raster, cloud, labels, cam)
        return run_postprocess(oracle_predictions(targets), targets.point_index, cloud, cam, post)
    rows, cols = raster.valid_pixels()
    pred = forward(params, extract_all_features(raster, cloud.appearance, rows, cols))
    return run_postprocess(pred, raster.point_index[rows, cols], cloud, cam, post)


def quick_head(n_scenes: int = 40, epochs: int = 20, seed: int = 0) -> HeadParams:
    """A briefly trained head so candidate counts look like a real detector's."""
    scenes = [generate_scene(SceneConfig(seed=seed + 1000), i) for i in range(n_scenes)]
    return train_head(scenes, optim_cfg=OptimConfig(epochs=epochs), seed=seed).params


def _timed(fn, times: list) -> None:
    t0 = time.perf_counter()
    fn()
    times.append(time.perf_counter() - t0)


def bench_range_scaling(max_ranges, reps: int = 20, warmup: int = 3, seed: int = 0,
                        density: float = OBJECTS_PER_M2, params: HeadParams | None = None,
                        oracle: bool = False) -> list[BenchRow]:
    """Median wall times per max range; ranges are interleaved within each repetition.

    Without ``params`` a head is trained briefly first (untimed) unless
    ``oracle`` is set.
    """
    ranges = [float(r) for r in max_ranges]
    if any(b <= a for a, b in zip(ranges, ranges[1:])):
        raise ValueError("max ranges must be strictly ascending")
    if reps < 1:
        raise ValueError("reps must be positive")
    if params is None and not oracle:
        params = quick_head(seed=seed)
    scenes = [generate_scene(density_scene_config(r, seed, density)) for r in ranges]
    rv = {r: [] for r in ranges}
    bev = {r: [] for r in ranges}
    for rep in range(warmup + reps):
        for r, s in zip(ranges, scenes):
            rv_t, bev_t = ([], []) if rep < warmup else (rv[r], bev[r])
            _timed(lambda: rv_pipeline(s.cloud, s.labels, s.camera, params), rv_t)
            _timed(lambda: bev_mock(s.cloud, r, s.config.hfov_deg), bev_t)
    return [BenchRow(r, statistics.median(rv[r]), statistics.median(bev[r]),
                     bev_cell_count(r, s.config.hfov_deg), len(s.labels), len(s.cloud))
            for r, s in zip(ranges, scenes)]


def rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for b in rows:
        w.writerow((f"{b.range_m:g}", f"{b.rv_time:.6e}", f"{b.bev_mock_time:.6e}", b.bev_cell_count,
                    b.n_objects, b.n_points))
    return buf.getvalue()


def rows_gnuplot(rows) -> str:
    """Whitespace-separated columns with a commented header, times in milliseconds."""
    lines = ["# range_m rv_ms bev_mock_ms bev_cells"]
    lines += [f"{b.range_m:g} {1e3 * b.rv_time:.4f} {1e3 * b.bev_mock_time:.4f} {b.bev_cell_count}" for b in rows]
    return "\n".join(lines) + "\n"
