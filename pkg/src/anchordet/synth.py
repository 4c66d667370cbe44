"""Synthetic long-range scenes and a ray-cast lidar.

Objects are boxes standing on a flat ground plane in front of a forward
camera. Their visible body is the labelled cuboid with the four vertical
edges chamfered, so a tight silhouette box is smaller than the box around
the eight projected cuboid corners whenever a corner faces the camera.
Lidar rays sample a regular azimuth/elevation grid and keep the first hit.

Each point also carries an "appearance" vector standing in for the image
at its pixel: a noisy one-hot class signature followed by a noisy cue of
the point's position inside the object's silhouette.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .geom import BehindCameraError, Box2D, Box3D, CameraModel, Point3, iou_bev, project_points
from .raster import PointCloud
from .targets import NUM_CLASSES, LinkedLabel, ObjectClass, project_3d_to_2d_label

SCENE_SCHEMA = "anchordet.scene"
SCENE_VERSION = 1
APPEARANCE_DIM = NUM_CLASSES + 2

# (w, l, h) in metres
EXTENT_PRIORS = {
    ObjectClass.VEHICLE: (2.0, 4.5, 1.6),
    ObjectClass.VRU: (0.7, 0.7, 1.7),
    ObjectClass.CONSTRUCTION: (0.5, 0.5, 1.0),
}
CLASS_NAMES = {c: c.name.lower() for c in ObjectClass}
CLASS_BY_NAME = {v: k for k, v in CLASS_NAMES.items()}


class SceneGenerationError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_vehicle: int = 8
    n_vru: int = 4
    n_construction: int = 4
    range_min: float = 100.0
    range_max: float = 500.0
    hfov_deg: float = 30.0
    image_width: int = 1580
    image_height: int = 320
    camera_height: float = 3.0
    az_res: float = 0.003
    el_res: float = 0.003
    angular_jitter: float = 0.0003
    lidar_max_range: float = 500.0
    range_noise: float = 0.02
    appearance_noise: float = 0.3
    cue_noise: float = 0.05
    chamfer: float = 0.2
    extent_jitter: float = 0.1
    gap: float = 0.5
    max_retries: int = 200
    range_sampling: str = "range"   # "range": uniform in range, "area": uniform over ground area

    def __post_init__(self):
        if not (self.az_res > 0 and self.el_res > 0):
            raise ValueError("lidar angular resolution must be positive")
        if not 0 < self.range_min < self.range_max <= self.lidar_max_range:
            raise ValueError("object range span must lie within the lidar range")
        if not 0 <= self.chamfer < 0.5:
            raise ValueError("chamfer must be in [0, 0.5)")
        if self.range_sampling not in ("range", "area"):
            raise ValueError(f"range_sampling must be 'range' or 'area', got {self.range_sampling!r}")

    def camera(self) -> CameraModel:
        return CameraModel.from_hfov(self.image_width, self.image_height, self.hfov_deg)

    def counts(self) -> dict:
        return {ObjectClass.VEHICLE: self.n_vehicle, ObjectClass.VRU: self.n_vru,
                ObjectClass.CONSTRUCTION: self.n_construction}


@dataclass
class Scene:
    scene_id: int
    config: SceneConfig
    camera: CameraModel
    labels: list
    cloud: PointCloud


def body_planes(box: Box3D, chamfer: float):
    """Half-spaces ``n . q <= d`` of the chamfered body in box-local (lat, up, fwd) coords."""
    w2, l2, h2 = box.w / 2, box.l / 2, box.h / 2
    normals = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    offsets = [w2, w2, h2, h2, l2, l2]
    c = chamfer * min(box.w, box.l)
    if c > 0:
        s = 1 / math.sqrt(2)
        for sx in (1, -1):
            for sz in (1, -1):
                normals.append((sx * s, 0, sz * s))
                offsets.append((w2 + l2 - c) * s)
    return np.array(normals, dtype=float), np.array(offsets)


def _local_frame(box: Box3D) -> np.ndarray:
    """Rows: lateral, vertical, heading unit vectors in camera frame."""
    fwd, lat = box.axes()
    return np.array([lat, [0.0, 1.0, 0.0], fwd])


def body_vertices(box: Box3D, chamfer: float) -> np.ndarray:
    w2, l2, h2 = box.w / 2, box.l / 2, box.h / 2
    c = chamfer * min(box.w, box.l)
    ring = [(sx * (w2 - c), sz * l2) for sx in (1, -1) for sz in (1, -1)]
    ring += [(sx * w2, sz * (l2 - c)) for sx in (1, -1) for sz in (1, -1)]
    local = np.array([(x, y, z) for x, z in ring for y in (-h2, h2)])
    return np.asarray(box.centroid) + local @ _local_frame(box)


def ray_hits(dirs: np.ndarray, box: Box3D, chamfer: float) -> np.ndarray:
    """Entry distance of each unit ray from the origin into the body, inf on a miss."""
    frame = _local_frame(box)
    d_loc = dirs @ frame.T
    o_loc = frame @ (-np.asarray(box.centroid))
    normals, offsets = body_planes(box, chamfer)
    nd = d_loc @ normals.T
    slack = offsets - normals @ o_loc
    with np.errstate(divide="ignore", invalid="ignore"):
        t = slack / nd
    t_enter = np.where(nd < 0, t, -np.inf).max(axis=1)
    t_exit = np.where(nd > 0, t, np.inf).min(axis=1)
    parallel_out = ((nd == 0) & (slack < 0)).any(axis=1)
    hit = (t_enter <= t_exit) & (t_enter > 0) & ~parallel_out
    return np.where(hit, t_enter, np.inf)


def true_2d_box(box: Box3D, cam: CameraModel, chamfer: float = SceneConfig.chamfer) -> Box2D:
    """Tight image box around the visible body, the stand-in for a human 2D label.

    The body is convex, so its silhouette is the hull of its projected
    vertices and the vertex bounds are exact.
    """
    uvc, _, in_front = project_points(cam, np.asarray(box.centroid))
    if not in_front[0] or not (0 <= uvc[0, 0] < cam.width and 0 <= uvc[0, 1] < cam.height):
        raise BehindCameraError("object centroid outside the camera field of view")
    verts = body_vertices(box, chamfer)
    if np.any(verts[:, 2] <= 0):
        raise BehindCameraError("object body crosses the image plane")
    uv, _, _ = project_points(cam, verts)
    return Box2D.from_corners(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())


def _place_box(rng, cls, cfg: SceneConfig, cam: CameraModel) -> Box3D:
    w, l, h = (e * (1 + cfg.extent_jitter * rng.uniform(-1, 1)) for e in EXTENT_PRIORS[cls])
    if cfg.range_sampling == "area":
        r = math.sqrt(rng.uniform(cfg.range_min ** 2, cfg.range_max ** 2))
    else:
        r = rng.uniform(cfg.range_min, cfg.range_max)
    half = math.radians(cfg.hfov_deg) / 2
    margin = math.atan2(math.hypot(w, l), r) + 0.002
    az = rng.uniform(-(half - margin), half - margin)
    y = cfg.camera_height - h / 2
    rho = math.sqrt(r * r - y * y)
    if cls == ObjectClass.VEHICLE:
        phi = math.radians(rng.uniform(-10, 10))
    else:
        phi = rng.uniform(-math.pi, math.pi)
    return Box3D(Point3(rho * math.sin(az), y, rho * math.cos(az)), w, l, h, phi)


def _inflated(box: Box3D, gap: float) -> Box3D:
    return replace(box, w=box.w + gap, l=box.l + gap)


def generate_scene(cfg: SceneConfig, scene_id: int = 0) -> Scene:
    """Place non-overlapping objects and ray-cast the lidar. Deterministic in ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, scene_id, 0])
    cam = cfg.camera()
    boxes = []
    classes = []
    for cls, n in cfg.counts().items():
        for _ in range(n):
            for _attempt in range(cfg.max_retries):
                box = _place_box(rng, cls, cfg, cam)
                try:
                    b2 = project_3d_to_2d_label(box, cam)
                except BehindCameraError:
                    continue
                x1, y1, x2, y2 = b2.corners
                if x1 < 0 or y1 < 0 or x2 > cam.width or y2 > cam.height:
                    continue
                fat = _inflated(box, cfg.gap)
                if all(iou_bev(fat, _inflated(o, cfg.gap)) == 0.0 for o in boxes):
                    break
            else:
                raise SceneGenerationError(
                    f"could not place {CLASS_NAMES[cls]} #{len(boxes)} without overlap "
                    f"after {cfg.max_retries} attempts")
            boxes.append(box)
            classes.append(cls)
    labels = [LinkedLabel(i, c, true_2d_box(b, cam, cfg.chamfer), b, project_3d_to_2d_label(b, cam))
              for i, (b, c) in enumerate(zip(boxes, classes))]
    scene = Scene(scene_id, cfg, cam, labels, PointCloud(np.zeros((0, 3)), np.zeros(0)))
    scene.cloud = sample_lidar(scene, cfg)
    return scene


def lidar_rays(cfg: SceneConfig, cam: CameraModel, rng=None) -> np.ndarray:
    """Unit directions of the scan grid covering the camera frustum."""
    half_az = math.radians(cfg.hfov_deg) / 2
    half_el = math.atan2(cam.cy, cam.fy)
    az = np.arange(-half_az, half_az, cfg.az_res)
    el = np.arange(-half_el, half_el, cfg.el_res)
    el_g, az_g = np.meshgrid(el, az, indexing="ij")
    az_g = az_g.reshape(-1)
    el_g = el_g.reshape(-1)
    if rng is not None and cfg.angular_jitter > 0:
        az_g = az_g + rng.normal(0, cfg.angular_jitter, az_g.shape)
        el_g = el_g + rng.normal(0, cfg.angular_jitter, el_g.shape)
    ce = np.cos(el_g)
    return np.column_stack([ce * np.sin(az_g), np.sin(el_g), ce * np.cos(az_g)])


def sample_lidar(scene: Scene, cfg: SceneConfig) -> PointCloud:
    """First-hit ray cast against the object bodies and the ground plane."""
    rng = np.random.default_rng([cfg.seed, scene.scene_id, 1])
    dirs = lidar_rays(cfg, scene.camera, rng)
    best_t = np.full(len(dirs), np.inf)
    owner = np.full(len(dirs), -1, dtype=np.int64)
    down = dirs[:, 1] > 0
    best_t[down] = cfg.camera_height / dirs[down, 1]
    for lab in scene.labels:
        t = ray_hits(dirs, lab.box3d, cfg.chamfer)
        closer = t < best_t
        best_t[closer] = t[closer]
        owner[closer] = lab.id
    if cfg.range_noise > 0:
        best_t = best_t + rng.normal(0, cfg.range_noise, best_t.shape)
    keep = np.isfinite(best_t) & (best_t > 0) & (best_t <= cfg.lidar_max_range)
    pos = dirs[keep] * best_t[keep, None]
    oid = owner[keep]
    cloud = PointCloud(pos, oid)
    cloud.appearance = appearance_signatures(scene, cloud, rng)
    return cloud


def appearance_signatures(scene: Scene, cloud: PointCloud, rng) -> np.ndarray:
    cfg = scene.config
    n = len(cloud)
    app = np.zeros((n, APPEARANCE_DIM))
    by_id = {lab.id: lab for lab in scene.labels}
    cls = np.array([int(by_id[o].cls) if o >= 0 else 0 for o in cloud.object_ids], dtype=np.int64)
    app[np.arange(n), cls] = 1.0
    app[:, :NUM_CLASSES] += rng.normal(0, cfg.appearance_noise, (n, NUM_CLASSES))
    uv, _, _ = project_points(scene.camera, cloud.positions)
    fg = np.nonzero(cloud.object_ids >= 0)[0]
    for k in fg:
        b = by_id[int(cloud.object_ids[k])].box2d
        app[k, NUM_CLASSES] = (b.cx - uv[k, 0]) / b.w
        app[k, NUM_CLASSES + 1] = (b.cy - uv[k, 1]) / b.h
    app[:, NUM_CLASSES:] += rng.normal(0, cfg.cue_noise, (n, 2))
    return app


def scale_labels(labels, pixel_factor: float = 1.0, range_factor: float = 1.0):
    """Labels as seen by a camera with ``pixel_factor`` times the pixel density,
    optionally with the world scaled radially by ``range_factor``."""
    out = []
    for lab in labels:
        b3 = lab.box3d
        if range_factor != 1.0:
            b3 = replace(b3, centroid=Point3(*(c * range_factor for c in b3.centroid)))

        def px(b):
            return None if b is None else Box2D(b.cx * pixel_factor, b.cy * pixel_factor,
                                                b.w * pixel_factor, b.h * pixel_factor)
        out.append(replace(lab, box2d=px(lab.box2d), box2d_proj=px(lab.box2d_proj), box3d=b3))
    return out


# ---------------------------------------------------------------- JSON lines

def box3d_to_json(b: Box3D) -> dict:
    return {"centroid": list(b.centroid), "w": b.w, "l": b.l, "h": b.h, "phi": b.phi}


def box3d_from_json(d) -> Box3D:
    return Box3D(Point3(*d["centroid"]), d["w"], d["l"], d["h"], d["phi"])


def label_to_json(lab: LinkedLabel) -> dict:
    rec = {"type": "label", "id": lab.id, "class": CLASS_NAMES[lab.cls],
           "box2d": [lab.box2d.cx, lab.box2d.cy, lab.box2d.w, lab.box2d.h],
           "box3d": box3d_to_json(lab.box3d)}
    if lab.box2d_proj is not None:
        p = lab.box2d_proj
        rec["box2d_proj"] = [p.cx, p.cy, p.w, p.h]
    return rec


def label_from_json(rec) -> LinkedLabel:
    proj = rec.get("box2d_proj")
    return LinkedLabel(int(rec["id"]), CLASS_BY_NAME[rec["class"]], Box2D(*rec["box2d"]),
                       box3d_from_json(rec["box3d"]), None if proj is None else Box2D(*proj))


def scene_records(scene: Scene):
    cam = scene.camera
    yield {"type": "scene", "schema": SCENE_SCHEMA, "version": SCENE_VERSION, "scene_id": scene.scene_id,
           "config": asdict(scene.config),
           "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                      "width": cam.width, "height": cam.height},
           "n_labels": len(scene.labels), "n_points": len(scene.cloud)}
    for lab in scene.labels:
        yield label_to_json(lab)
    c = scene.cloud
    for i in range(len(c)):
        rec = {"type": "point", "id": int(c.ids[i]), "xyz": c.positions[i].tolist(),
               "object_id": int(c.object_ids[i])}
        if c.appearance is not None:
            rec["appearance"] = c.appearance[i].tolist()
        yield rec


def dumps_scenes(scenes) -> str:
    lines = []
    for s in scenes:
        lines.extend(json.dumps(r, separators=(",", ":")) for r in scene_records(s))
    return "\n".join(lines) + "\n" if lines else ""


def _scene_from_parts(head, labels, points, where) -> Scene:
    if len(labels) != head.get("n_labels", len(labels)) or len(points) != head.get("n_points", len(points)):
        raise SceneFormatError(f"{where}: scene {head['scene_id']} record counts do not match its header")
    known = {f.name for f in fields(SceneConfig)}
    cfg = SceneConfig(**{k: v for k, v in head["config"].items() if k in known})
    cam = CameraModel(**head["camera"])
    if points:
        pos = np.array([p["xyz"] for p in points], dtype=float)
        oid = np.array([p["object_id"] for p in points], dtype=np.int64)
        ids = np.array([p["id"] for p in points], dtype=np.int64)
        app = np.array([p["appearance"] for p in points]) if "appearance" in points[0] else None
    else:
        pos, oid, ids, app = np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0, np.int64), None
    return Scene(int(head["scene_id"]), cfg, cam, labels, PointCloud(pos, oid, ids, app))


def iter_scenes(path):
    """Stream scenes from a JSON-lines file; errors carry ``path:line``."""
    head = None
    labels, points = [], []
    start = 0
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                kind = rec["type"]
                if kind == "scene":
                    if rec.get("schema") != SCENE_SCHEMA or rec.get("version") != SCENE_VERSION:
                        raise SceneFormatError(f"{where}: unsupported schema {rec.get('schema')!r} "
                                               f"version {rec.get('version')!r}")
                    if head is not None:
                        yield _scene_from_parts(head, labels, points, f"{path}:{start}")
                    head, labels, points, start = rec, [], [], lineno
                elif head is None:
                    raise SceneFormatError(f"{where}: {kind} record before any scene header")
                elif kind == "label":
                    labels.append(label_from_json(rec))
                elif kind == "point":
                    points.append(rec)
                else:
                    raise SceneFormatError(f"{where}: unknown record type {kind!r}")
            except SceneFormatError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise SceneFormatError(f"{where}: malformed record ({type(e).__name__}: {e})") from e
    if head is not None:
        yield _scene_from_parts(head, labels, points, f"{path}:{start}")


def load_scenes(path) -> list:
    return list(iter_scenes(Path(path)))
