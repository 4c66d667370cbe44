import math

import numpy as np
import pytest

from anchordet.bench import (BEV_CELL, BenchRow, bench_range_scaling, bev_cell_count, bev_grid_shape, bev_mock,
                             density_scene_config, rows_csv, rows_gnuplot, rv_pipeline, wedge_area)
from anchordet.raster import PointCloud
from anchordet.synth import generate_scene


@pytest.mark.parametrize("r", [50.0, 100.0, 150.0, 200.0, 250.0])
def test_cell_count_quadratic(r):
    assert bev_cell_count(2 * r) == 4 * bev_cell_count(r)


def test_grid_shape_formula():
    d, w = bev_grid_shape(100.0)
    assert d == round(100 / BEV_CELL)
    assert w == 2 * math.ceil(100 * math.tan(math.radians(15)) / BEV_CELL)


def test_bev_mock_scatter_and_filter():
    cloud = PointCloud([[0.05, 0, 10.05], [0.1, 0, 10.1], [5, 0, 50]], [-1, -1, -1])
    assert bev_mock(cloud, 100.0) == 2.0
    far = PointCloud([[0, 0, 150]], [-1])
    assert bev_mock(far, 100.0) == 0.0


def test_density_config():
    for r in (100.0, 300.0, 500.0):
        cfg = density_scene_config(r)
        n = cfg.n_vehicle + cfg.n_vru + cfg.n_construction
        assert n == max(1, round(wedge_area(60.0, r) / 1000.0))
        assert cfg.range_sampling == "area" and cfg.range_max == r


def test_rv_pipeline_oracle_runs():
    s = generate_scene(density_scene_config(200.0))
    dets = rv_pipeline(s.cloud, s.labels, s.camera)
    assert 0 < len(dets) <= len(s.labels)


def test_bench_rows_and_outputs():
    rows = bench_range_scaling([100, 200], reps=1, warmup=0, oracle=True)
    assert [r.range_m for r in rows] == [100.0, 200.0]
    assert rows[1].bev_cell_count == 4 * rows[0].bev_cell_count
    assert all(r.rv_time > 0 and r.bev_mock_time > 0 for r in rows)
    text = rows_csv(rows).splitlines()
    assert text[0] == "range_m,rv_time_s,bev_mock_time_s,bev_cell_count,n_objects,n_points"
    assert text[1].startswith("100,") and len(text) == 3
    dat = rows_gnuplot(rows).splitlines()
    assert dat[0].startswith("#") and len(dat[1].split()) == 4
    with pytest.raises(ValueError):
        bench_range_scaling([200, 100], oracle=True)


def test_csv_format():
    row = BenchRow(100.0, 0.01, 0.002, 134000, 5, 6000)
    assert rows_csv([row]).splitlines()[1] == "100,1.000000e-02,2.000000e-03,134000,5,6000"
