import math
from dataclasses import replace

import numpy as np
import pytest

from anchordet.geom import Box3D, Point3, iou_bev
from anchordet.raster import RASTER_2MP, PointCloud, build_depth_raster
from anchordet.synth import (EXTENT_PRIORS, NUM_CLASSES, Scene, SceneConfig, SceneFormatError, SceneGenerationError,
                             dumps_scenes, generate_scene, lidar_rays, load_scenes, ray_hits, sample_lidar,
                             true_2d_box)
from anchordet.targets import LinkedLabel, ObjectClass, build_target_grid, project_3d_to_2d_label

QUIET = SceneConfig(angular_jitter=0.0, range_noise=0.0, n_vehicle=0, n_vru=0, n_construction=0)


def custom_scene(boxes, cfg=QUIET, scene_id=0):
    cam = cfg.camera()
    labels = [LinkedLabel(i, ObjectClass.VEHICLE, true_2d_box(b, cam, cfg.chamfer), b, project_3d_to_2d_label(b, cam))
              for i, b in enumerate(boxes)]
    s = Scene(scene_id, cfg, cam, labels, PointCloud(np.zeros((0, 3)), np.zeros(0)))
    s.cloud = sample_lidar(s, cfg)
    return s


def n_hits(scene, lid):
    return int((scene.cloud.object_ids == lid).sum())


def test_determinism():
    cfg = SceneConfig(seed=42)
    a, b = generate_scene(cfg, 3), generate_scene(cfg, 3)
    assert dumps_scenes([a]) == dumps_scenes([b])
    assert dumps_scenes([a]) != dumps_scenes([generate_scene(cfg, 4)])


def test_zero_objects_ground_only():
    s = generate_scene(QUIET)
    assert s.labels == [] and len(s.cloud) > 0 and (s.cloud.object_ids == -1).all()
    assert np.allclose(s.cloud.positions[:, 1], QUIET.camera_height)


def test_scenes_are_valid():
    for sid in range(100):
        s = generate_scene(SceneConfig(seed=1), sid)
        cfg, cam = s.config, s.camera
        assert len(s.labels) == 16
        for i, a in enumerate(s.labels):
            assert cfg.range_min <= a.box3d.range <= cfg.range_max + 1e-9
            x1, y1, x2, y2 = a.box2d_proj.corners
            assert x1 >= 0 and y1 >= 0 and x2 <= cam.width and y2 <= cam.height
            for b in s.labels[i + 1:]:
                assert iou_bev(a.box3d, b.box3d) == 0.0
        if sid < 10:
            build_target_grid(build_depth_raster(s.cloud, cam, *RASTER_2MP), s.cloud, s.labels, cam)


def test_correspondences_match_ray_cast():
    s = generate_scene(SceneConfig(seed=2), 0)
    dirs = s.cloud.positions / np.linalg.norm(s.cloud.positions, axis=1, keepdims=True)
    t = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore"):
        t = np.where(dirs[:, 1] > 0, s.config.camera_height / dirs[:, 1], np.inf)
    owner = np.full(len(dirs), -1)
    for lab in s.labels:
        h = ray_hits(dirs, lab.box3d, s.config.chamfer)
        closer = h < t
        t[closer], owner[closer] = h[closer], lab.id
    np.testing.assert_array_equal(owner, s.cloud.object_ids)


def test_solid_angle_point_count():
    box = Box3D(Point3(0.0, 0.0, 100.0), 8.0, 2.0, 3.0, 0.0)
    s = custom_scene([box])
    # rays sample a regular az/el grid, so hits ~ solid angle / cell solid angle
    expected = (box.w / 100.0) * (box.h / 100.0) / (QUIET.az_res * QUIET.el_res)
    assert n_hits(s, 0) == pytest.approx(expected, rel=0.2)


def test_inverse_square_falloff():
    cfg = replace(QUIET, angular_jitter=0.0003)
    near = far = 0
    rng = np.random.default_rng(0)
    for k in range(20):
        az = rng.uniform(-0.15, 0.15)
        for r, acc in ((150.0, "near"), (300.0, "far")):
            box = Box3D(Point3(r * math.sin(az), 1.5, r * math.cos(az)), 6.0, 6.0, 3.0, rng.uniform(-1, 1))
            n = n_hits(custom_scene([box], cfg, k), 0)
            if acc == "near":
                near += n
            else:
                far += n
    assert far / near == pytest.approx(0.25, abs=0.04)


def test_distant_objects_are_sparse():
    s = custom_scene([Box3D(Point3(0, 2.1, 480.0), *EXTENT_PRIORS[ObjectClass.VRU], 0.0)],
                     replace(QUIET, angular_jitter=0.0003))
    assert n_hits(s, 0) <= 5


def test_occlusion():
    front = Box3D(Point3(0.0, 1.0, 150.0), 6.0, 3.0, 4.0, 0.0)
    back = Box3D(Point3(0.0, 2.0, 300.0), 1.0, 1.0, 2.0, 0.0)
    s = custom_scene([front, back])
    assert n_hits(s, 0) > 0 and n_hits(s, 1) == 0


def test_true_2d_box_containment():
    cfg = SceneConfig()
    cam = cfg.camera()
    rng = np.random.default_rng(3)
    for _ in range(1000):
        r = rng.uniform(100, 500)
        az = rng.uniform(-0.2, 0.2)
        box = Box3D(Point3(r * math.sin(az), rng.uniform(0, 2.5), r * math.cos(az)), rng.uniform(0.4, 3),
                    rng.uniform(0.4, 6), rng.uniform(0.5, 2), rng.uniform(-math.pi, math.pi))
        assert project_3d_to_2d_label(box, cam).contains(true_2d_box(box, cam, cfg.chamfer))


def test_rotated_box_silhouette_smaller():
    cam = SceneConfig().camera()
    box = Box3D(Point3(0.0, 1.0, 60.0), 4.0, 4.0, 2.0, math.pi / 4)
    tight, proj = true_2d_box(box, cam, 0.2), project_3d_to_2d_label(box, cam)
    assert tight.area < proj.area
    facing = Box3D(Point3(0.0, 1.0, 60.0), 4.0, 2.0, 2.0, 0.0)
    front = replace(facing, centroid=Point3(0.0, 1.0, 59.0), l=1e-9)
    np.testing.assert_allclose(true_2d_box(facing, cam, 0.0).corners, project_3d_to_2d_label(front, cam).corners,
                               atol=1e-6)


def test_appearance_is_class_informative():
    s = generate_scene(SceneConfig(seed=4), 0)
    sig = s.cloud.appearance[:, :NUM_CLASSES]
    cls = np.zeros(len(s.cloud), int)
    by_id = {lab.id: int(lab.cls) for lab in s.labels}
    fg = s.cloud.object_ids >= 0
    cls[fg] = [by_id[o] for o in s.cloud.object_ids[fg]]
    cents = np.array([sig[cls == c].mean(axis=0) for c in range(NUM_CLASSES)])
    pred = np.argmin(((sig[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    per_class = [np.mean(pred[cls == c] == c) for c in range(NUM_CLASSES)]
    assert min(per_class) > 1 / NUM_CLASSES


def test_generation_failure():
    cfg = SceneConfig(n_vehicle=400, max_retries=5, range_min=100, range_max=101)
    with pytest.raises(SceneGenerationError):
        generate_scene(cfg)
    with pytest.raises(ValueError):
        SceneConfig(range_max=600)
    with pytest.raises(ValueError):
        SceneConfig(range_sampling="log")


def test_lidar_rays_unit():
    cfg = SceneConfig()
    d = lidar_rays(cfg, cfg.camera())
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)


def test_jsonl_round_trip(tmp_path):
    scenes = [generate_scene(SceneConfig(seed=5, n_vehicle=2, n_vru=1, n_construction=1), i) for i in range(2)]
    path = tmp_path / "s.jsonl"
    text = dumps_scenes(scenes)
    path.write_text(text)
    back = load_scenes(path)
    assert dumps_scenes(back) == text
    for a, b in zip(scenes, back):
        assert a.labels == b.labels and a.camera == b.camera
        np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
        np.testing.assert_array_equal(a.cloud.appearance, b.cloud.appearance)


@pytest.mark.parametrize("bad, lineno", [("{not json", 3), ('{"type":"wat"}', 3), ('{"type":"label","id":0}', 2)])
def test_jsonl_errors_carry_line_numbers(tmp_path, bad, lineno):
    s = generate_scene(SceneConfig(seed=6, n_vehicle=1, n_vru=0, n_construction=0))
    lines = dumps_scenes([s]).splitlines()
    lines[lineno - 1] = bad
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(SceneFormatError, match=f"{path}:{lineno}:"):
        load_scenes(path)


def test_jsonl_count_mismatch(tmp_path):
    s = generate_scene(SceneConfig(seed=6, n_vehicle=1, n_vru=0, n_construction=0))
    lines = dumps_scenes([s]).splitlines()
    path = tmp_path / "short.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(SceneFormatError, match=f"{path}:1:"):
        load_scenes(path)
