"""A small per-point prediction head and its training loop.

The head sees one feature vector per sentinel pixel (depth-patch statistics,
pixel position, appearance signature) and emits the full raw prediction row
consumed by :mod:`anchordet.loss`. It is a two-layer tanh MLP with fixed
input standardisation and output affine scaling, trained with Adam.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .loss import OUT_DIM, SL_LOGB2D, SL_LOGB3D, SL_LOGITS, SL_MEAN2D, SL_MEAN3D, LossConfig, PredictionGrid, total_loss
from .raster import DepthRaster
from .targets import NUM_CLASSES, TargetGrid

log = logging.getLogger(__name__)

PATCH = 5
N_DEPTH_FEATURES = 9
CHECKPOINT_MAGIC = b"ANCHDET\x00"
CHECKPOINT_VERSION = 1
_PARAM_NAMES = ("in_mean", "in_std", "w1", "b1", "w2", "b2", "out_scale", "out_shift")


class TrainingDiverged(RuntimeError):
    pass


def _depth_features(raster: DepthRaster, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    half = PATCH // 2
    rng = np.pad(raster.range_ch, half)
    sen = np.pad(raster.sentinel_ch.astype(bool), half)
    dr, dc = np.meshgrid(np.arange(PATCH), np.arange(PATCH), indexing="ij")
    rr = rows[:, None] + dr.reshape(-1)[None, :]
    cc = cols[:, None] + dc.reshape(-1)[None, :]
    nb = rng[rr, cc]
    ok = sen[rr, cc]
    r0 = raster.range_ch[rows, cols]
    rel = np.where(ok, nb - r0[:, None], 0.0)
    count = ok.sum(axis=1)
    mean = rel.sum(axis=1) / count
    var = (np.where(ok, rel - mean[:, None], 0.0) ** 2).sum(axis=1) / count
    lo = np.where(ok, rel, np.inf).min(axis=1)
    hi = np.where(ok, rel, -np.inf).max(axis=1)
    return np.column_stack([
        r0 / 500.0,
        100.0 / r0,
        np.tanh(mean / 5.0),
        np.tanh(np.sqrt(var) / 5.0),
        np.tanh(lo / 5.0),
        np.tanh(hi / 5.0),
        count / PATCH ** 2,
        (cols + 0.5) / raster.width,
        (rows + 0.5) / raster.height,
    ])


def extract_all_features(raster: DepthRaster, appearance: np.ndarray | None,
                         rows=None, cols=None) -> np.ndarray:
    """Feature rows for the given sentinel pixels (all of them by default, row-major)."""
    if rows is None:
        rows, cols = raster.valid_pixels()
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if np.any(raster.sentinel_ch[rows, cols] != 1):
        raise ValueError("features requested for a pixel without a lidar return")
    depth = _depth_features(raster, rows, cols)
    if appearance is None:
        return depth
    return np.column_stack([depth, appearance[raster.point_index[rows, cols]]])


def extract_features(raster: DepthRaster, appearance: np.ndarray | None, pixel) -> np.ndarray:
    """Feature vector of a single ``(row, col)`` sentinel pixel."""
    r, c = pixel
    return extract_all_features(raster, appearance, [r], [c])[0]


@dataclass
class HeadParams:
    in_mean: np.ndarray
    in_std: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    out_scale: np.ndarray
    out_shift: np.ndarray

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in _PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.arrays().items()})

    def trainable(self) -> tuple[str, ...]:
        return ("w1", "b1", "w2", "b2")

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int = 64) -> "HeadParams":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros((n_in, n_hidden)), np.zeros(n_hidden),
                   np.zeros((n_hidden, OUT_DIM)), np.zeros(OUT_DIM), np.ones(OUT_DIM), np.zeros(OUT_DIM))

    @classmethod
    def init(cls, features: np.ndarray, targets: TargetGrid, n_hidden: int = 64, seed: int = 0) -> "HeadParams":
        """Random weights plus data-derived input/output normalisation."""
        rng = np.random.default_rng(seed)
        n_in = features.shape[1]
        p = cls.zeros(n_in, n_hidden)
        p.in_mean = features.mean(axis=0)
        p.in_std = np.maximum(features.std(axis=0), 1e-6)
        p.w1 = rng.normal(0, 1 / math.sqrt(n_in), (n_in, n_hidden))
        p.w2 = rng.normal(0, 0.01, (n_hidden, OUT_DIM))
        counts = np.bincount(targets.cls, minlength=NUM_CLASSES) + 1.0
        p.out_shift[SL_LOGITS] = np.log(counts / counts.sum())
        fg = targets.fg
        if fg.any():
            for sl, cols in ((SL_MEAN2D, targets.t2d[fg]), (SL_MEAN3D, targets.t3d[fg])):
                med = np.median(cols, axis=0)
                mad = np.maximum(np.mean(np.abs(cols - med), axis=0), 1e-3)
                p.out_shift[sl] = med
                p.out_scale[sl] = mad
                logb = SL_LOGB2D if sl == SL_MEAN2D else SL_LOGB3D
                p.out_shift[logb] = np.log(mad)
        return p


def forward(params: HeadParams, features: np.ndarray, b_min: float = LossConfig.b_min,
            return_cache: bool = False):
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.n_in:
        raise ValueError(f"head expects {params.n_in} features, got {x.shape[1]}")
    xn = (x - params.in_mean) / params.in_std
    h = np.tanh(xn @ params.w1 + params.b1)
    o = h @ params.w2 + params.b2
    pred = PredictionGrid(o * params.out_scale + params.out_shift, b_min)
    if return_cache:
        return pred, (xn, h)
    return pred


def backward(params: HeadParams, cache, grad_raw: np.ndarray) -> dict:
    xn, h = cache
    g_o = grad_raw * params.out_scale
    g_h = g_o @ params.w2.T
    g_a = g_h * (1.0 - h * h)
    return {"w1": xn.T @ g_a, "b1": g_a.sum(axis=0), "w2": h.T @ g_o, "b2": g_o.sum(axis=0)}


def loss_and_grad(params: HeadParams, features, targets: TargetGrid, cfg: LossConfig = LossConfig()):
    pred, cache = forward(params, features, cfg.b_min, return_cache=True)
    total, g_raw, parts = total_loss(pred, targets, cfg)
    return total, backward(params, cache, g_raw), parts


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    decay_rate: float = 0.9
    decay_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 4096
    hidden: int = 64


@dataclass
class TrainResult:
    params: HeadParams
    curve: list = field(default_factory=list)


class Adam:
    def __init__(self, params: HeadParams, cfg: OptimConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(getattr(params, k)) for k in params.trainable()}
        self.v = {k: np.zeros_like(getattr(params, k)) for k in params.trainable()}
        self.t = 0

    def lr(self) -> float:
        c = self.cfg
        return c.lr * c.decay_rate ** (self.t / c.decay_steps)

    def step(self, params: HeadParams, grads: dict) -> None:
        c = self.cfg
        lr = self.lr()
        self.t += 1
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mh = self.m[k] / (1 - c.beta1 ** self.t)
            vh = self.v[k] / (1 - c.beta2 ** self.t)
            setattr(params, k, getattr(params, k) - lr * mh / (np.sqrt(vh) + c.eps))


def train(features: np.ndarray, targets: TargetGrid, loss_cfg: LossConfig = LossConfig(),
          optim_cfg: OptimConfig = OptimConfig(), seed: int = 0, params: HeadParams | None = None,
          steps: int | None = None) -> TrainResult:
    """Minibatch Adam over all pixels.

    ``curve`` gets one row per epoch (or per step when ``steps`` is given, in
    which case the whole set is one full batch) with mean total, class, 2D and
    3D loss. Final parameters are rounded to float32 so checkpoints are exact.
    """
    n = len(targets)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if params is None:
        params = HeadParams.init(features, targets, optim_cfg.hidden, seed)
    else:
        params = params.copy()
    opt = Adam(params, optim_cfg)
    rng = np.random.default_rng([seed, 7])
    result = TrainResult(params)

    def _step(idx):
        total, grads, parts = loss_and_grad(params, features[idx], targets.take(idx), loss_cfg)
        if not math.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {opt.t}: {parts}")
        opt.step(params, grads)
        return total, parts

    if steps is not None:
        idx = np.arange(n)
        for _ in range(steps):
            total, parts = _step(idx)
            result.curve.append({"total": total, **parts})
    else:
        bs = min(optim_cfg.batch_size, n)
        for epoch in range(optim_cfg.epochs):
            order = rng.permutation(n)
            sums = {"total": 0.0, "class": 0.0, "2d": 0.0, "3d": 0.0}
            nb = 0
            for s in range(0, n - bs + 1, bs):
                total, parts = _step(order[s:s + bs])
                sums["total"] += total
                for k, v in parts.items():
                    sums[k] += v
                nb += 1
            row = {k: v / nb for k, v in sums.items()}
            result.curve.append(row)
            log.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    for k, v in params.arrays().items():
        setattr(params, k, v.astype(np.float32).astype(np.float64))
    return result


def save_checkpoint(path, params: HeadParams, meta: dict | None = None) -> None:
    """Magic, u32 version, u32 header length, JSON header, little-endian f32 blob."""
    header = {"shapes": {k: list(v.shape) for k, v in params.arrays().items()}, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(v.astype("<f4").tobytes() for v in params.arrays().values())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(blob)


def load_checkpoint(path) -> tuple[HeadParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a head checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    off = 16 + hlen
    arrays = {}
    for k in _PARAM_NAMES:
        shape = tuple(header["shapes"][k])
        n = int(np.prod(shape)) if shape else 1
        arrays[k] = np.frombuffer(data, "<f4", n, off).astype(np.float64).reshape(shape)
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blob")
    return HeadParams(**arrays), header["meta"]
