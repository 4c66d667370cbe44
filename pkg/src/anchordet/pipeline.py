"""Glue from scenes to training sets and from checkpoints to detections.

Training rasterises each scene at the low raster resolution after random
point dropout. Inference either repeats that setup or, with resolution
transfer, rasterises at twice the pixel density with dropout off and every
range halved, then maps detections back to true range.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .geom import Box2D, CameraModel
from .head import HeadParams, OptimConfig, TrainResult, extract_all_features, forward, train
from .loss import LossConfig, PredictionGrid
from .postproc import PostprocConfig, run_postprocess
from .raster import (RASTER_2MP, TRAIN_DROPOUT, TRANSFER_RANGE_FACTOR, DepthRaster, PointCloud,
                     build_depth_raster, dropout_points, rescale_ranges, undo_rescale)
from .targets import Detection, TargetGrid, build_target_grid

SUPERVISION_MODES = ("3d", "3d+proj2d", "3d+2d")
TRANSFER_PIXEL_FACTOR = 2


def supervision_setup(mode: str) -> tuple[str, bool]:
    """``(box2d_source, supervise_2d)`` for a supervision mode name."""
    if mode == "3d":
        return "true", False
    if mode == "3d+proj2d":
        return "proj", True
    if mode == "3d+2d":
        return "true", True
    raise ValueError(f"supervision must be one of {SUPERVISION_MODES}, got {mode!r}")


@dataclass
class Frame:
    """One scene as the head sees it."""

    cloud: PointCloud
    cam: CameraModel
    raster: DepthRaster
    features: np.ndarray
    targets: TargetGrid | None = None


def make_frame(scene, raster_size=RASTER_2MP, dropout: float = TRAIN_DROPOUT, seed=0,
               box2d_source: str | None = "true", cam: CameraModel | None = None,
               range_factor: float = 1.0) -> Frame:
    """Rasterise a scene; targets are built only when ``box2d_source`` is given."""
    cam = scene.camera if cam is None else cam
    cloud = dropout_points(scene.cloud, dropout, seed) if dropout > 0 else scene.cloud
    if range_factor != 1.0:
        cloud = rescale_ranges(cloud, range_factor)
    raster = build_depth_raster(cloud, cam, *raster_size)
    feats = extract_all_features(raster, cloud.appearance)
    targets = None
    if box2d_source is not None:
        targets = build_target_grid(raster, cloud, scene.labels, cam, box2d_source)
    return Frame(cloud, cam, raster, feats, targets)


def _train_seed(seed, scene_id):
    return [seed, scene_id, 2]


def _infer_seed(seed, scene_id):
    return [seed, scene_id, 3]


def training_set(scenes, supervision: str = "3d+2d", seed=0,
                 dropout: float = TRAIN_DROPOUT) -> tuple[np.ndarray, TargetGrid]:
    source, _ = supervision_setup(supervision)
    frames = [make_frame(s, dropout=dropout, seed=_train_seed(seed, s.scene_id), box2d_source=source)
              for s in scenes]
    return np.concatenate([f.features for f in frames]), TargetGrid.concat([f.targets for f in frames])


def train_head(scenes, supervision: str = "3d+2d", optim_cfg: OptimConfig = OptimConfig(),
               seed=0, loss_cfg: LossConfig | None = None) -> TrainResult:
    _, sup2d = supervision_setup(supervision)
    loss_cfg = dataclasses.replace(loss_cfg or LossConfig(), supervise_2d=sup2d)
    feats, targets = training_set(scenes, supervision, seed)
    return train(feats, targets, loss_cfg, optim_cfg, seed)


def predict(params: HeadParams, frame: Frame, b_min: float = LossConfig.b_min) -> PredictionGrid:
    return forward(params, frame.features, b_min)


def detect_frame(pred: PredictionGrid, frame: Frame, post: PostprocConfig) -> list[Detection]:
    rows, cols = frame.raster.valid_pixels()
    return run_postprocess(pred, frame.raster.point_index[rows, cols], frame.cloud, frame.cam, post)


def unscale_detection(det: Detection, range_factor: float, pixel_factor: float) -> Detection:
    """Undo range rescaling and express the 2D box in source-camera pixels."""
    det = undo_rescale(det, range_factor)
    b = det.box2d
    return dataclasses.replace(det, box2d=Box2D(b.cx / pixel_factor, b.cy / pixel_factor,
                                                b.w / pixel_factor, b.h / pixel_factor))


def transfer_frame(scene, box2d_source: str | None = None) -> Frame:
    """Double pixel density, no dropout, ranges scaled by the transfer factor."""
    cam = scene.camera.scaled(TRANSFER_PIXEL_FACTOR)
    size = tuple(TRANSFER_PIXEL_FACTOR * s for s in RASTER_2MP)
    return make_frame(scene, size, dropout=0.0, box2d_source=box2d_source, cam=cam,
                      range_factor=TRANSFER_RANGE_FACTOR)


def infer_scene(params: HeadParams, scene, post: PostprocConfig = PostprocConfig(), seed=0,
                resolution_transfer: bool = False) -> list[Detection]:
    """Detections in the scene's own camera frame and true range."""
    if resolution_transfer:
        frame = transfer_frame(scene)
        dets = detect_frame(predict(params, frame), frame, post)
        return [unscale_detection(d, TRANSFER_RANGE_FACTOR, TRANSFER_PIXEL_FACTOR) for d in dets]
    frame = make_frame(scene, dropout=TRAIN_DROPOUT, seed=_infer_seed(seed, scene.scene_id), box2d_source=None)
    return detect_frame(predict(params, frame), frame, post)


# supervision x NMS rows of the ablation table
ABLATION_GRID = (("3d", "3d"), ("3d+proj2d", "both"), ("3d+2d", "both"), ("3d+2d", "3d"), ("3d+2d", "2d"))


def run_ablation(train_scenes, test_scenes, optim_cfg: OptimConfig = OptimConfig(), seed=0,
                 eval_cfg=None, post: PostprocConfig = PostprocConfig(), grid=ABLATION_GRID,
                 loss_cfg: LossConfig | None = None) -> list[dict]:
    """Train once per supervision mode, evaluate each listed NMS mode on held-out scenes.

    Each row holds the supervision and NMS names plus metric rows as from
    :func:`anchordet.evaluation.evaluate`, once per range bucket and once
    with all buckets pooled into one.
    """
    from .evaluation import EvalConfig, evaluate

    eval_cfg = eval_cfg or EvalConfig()
    pooled = dataclasses.replace(eval_cfg, buckets=((eval_cfg.buckets[0][0], eval_cfg.buckets[-1][1]),))
    labels = [s.labels for s in test_scenes]
    trained = {}
    out = []
    for sup, nms in grid:
        if sup not in trained:
            trained[sup] = train_head(train_scenes, sup, optim_cfg, seed, loss_cfg).params
        cfg = dataclasses.replace(post, nms=nms)
        dets = [infer_scene(trained[sup], s, cfg, seed) for s in test_scenes]
        metrics = evaluate(dets, labels, eval_cfg)
        if len(eval_cfg.buckets) > 1:
            metrics += evaluate(dets, labels, pooled)
        out.append({"supervision": sup, "nms": nms, "metrics": metrics})
    return out
