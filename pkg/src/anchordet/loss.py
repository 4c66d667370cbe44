"""Focal classification loss and Laplacian NLL regression losses.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the raw
prediction array (see :class:`PredictionGrid`), so gradients from the
individual terms can be summed and fed straight into backprop.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .targets import TargetGrid

# column layout of the raw per-pixel prediction vector
SL_LOGITS = slice(0, 4)
SL_MEAN2D = slice(4, 8)     # dx, dy, w, h
SL_LOGB2D = slice(8, 12)
SL_MEAN3D = slice(12, 18)   # dx, dy, dd, w, l, h
SL_LOGB3D = slice(18, 24)
SL_CS = slice(24, 26)       # cos, sin of heading relative to bearing
OUT_DIM = 26

# 3D columns that carry a Laplacian term regardless of the dd flag
_LAPLACE_3D = np.array([0, 1, 3, 4, 5])
_DD = 2


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    b_min: float = 1e-3
    dd_laplace: bool = True     # False: dd supervised with plain L1
    supervise_2d: bool = True

    def __post_init__(self):
        if not self.focal_gamma >= 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha <= 1:
            raise ValueError("focal_alpha must be in (0, 1]")
        if not self.b_min > 0:
            raise ValueError("b_min must be positive")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass
class PredictionGrid:
    """Raw head output for N pixels, shape (N, OUT_DIM).

    Diversities are stored as log-b and read back through ``exp`` with a
    floor at ``b_min``.
    """

    raw: np.ndarray
    b_min: float = LossConfig.b_min

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.ndim != 2 or self.raw.shape[1] != OUT_DIM:
            raise ValueError(f"prediction rows must have {OUT_DIM} columns, got {self.raw.shape}")

    def __len__(self):
        return len(self.raw)

    @property
    def logits(self):
        return self.raw[:, SL_LOGITS]

    @property
    def probs(self):
        return np.exp(log_softmax(self.logits))

    @property
    def mean2d(self):
        return self.raw[:, SL_MEAN2D]

    @property
    def mean3d(self):
        return self.raw[:, SL_MEAN3D]

    @property
    def b2d(self):
        return np.maximum(np.exp(self.raw[:, SL_LOGB2D]), self.b_min)

    @property
    def b3d(self):
        return np.maximum(np.exp(self.raw[:, SL_LOGB3D]), self.b_min)

    @property
    def cs(self):
        return self.raw[:, SL_CS]

    def take(self, idx) -> "PredictionGrid":
        return PredictionGrid(self.raw[idx], self.b_min)


def oracle_predictions(t: TargetGrid, confidence: float = 50.0, b_min: float = LossConfig.b_min) -> PredictionGrid:
    """Predictions equal to the targets: one-hot logits, exact means, unit diversity."""
    raw = np.zeros((len(t), OUT_DIM))
    raw[:, SL_LOGITS] = confidence * t.one_hot()
    fg = t.fg
    raw[fg, SL_MEAN2D] = t.t2d[fg]
    raw[fg, SL_MEAN3D] = t.t3d[fg]
    raw[fg, SL_CS] = t.cs[fg]
    return PredictionGrid(raw, b_min)


def focal_loss(pred: PredictionGrid, t: TargetGrid, cfg: LossConfig = LossConfig()):
    """-(1/N) sum alpha (1 - p)^gamma log p over all sentinel pixels."""
    grad = np.zeros_like(pred.raw)
    n = len(pred)
    if n == 0:
        return 0.0, grad
    a, g = cfg.focal_alpha, cfg.focal_gamma
    lsm = log_softmax(pred.logits)
    rows = np.arange(n)
    logp = lsm[rows, t.cls]
    p = np.exp(logp)
    q = 1.0 - p
    loss = -a * np.sum(q ** g * logp) / n
    # dL/dlogp_t, then chain through d logp_t / dz_j = delta_tj - p_j
    with np.errstate(divide="ignore", invalid="ignore"):
        dq = np.where(q > 0, g * q ** (g - 1.0), 0.0) if g > 0 else np.zeros_like(q)
    dlogp = -a * (q ** g - dq * p * logp) / n
    probs = np.exp(lsm)
    onehot = np.zeros_like(probs)
    onehot[rows, t.cls] = 1.0
    grad[:, SL_LOGITS] = dlogp[:, None] * (onehot - probs)
    return float(loss), grad


def _laplace_terms(mean, logb, target, b_min):
    """Per-element |t - m| / b + log b and its gradients wrt mean and log-b."""
    b_raw = np.exp(logb)
    clamped = b_raw < b_min
    b = np.where(clamped, b_min, b_raw)
    e = target - mean
    ae = np.abs(e)
    val = ae / b + np.log(b)
    d_mean = -np.sign(e) / b
    d_logb = np.where(clamped, 0.0, 1.0 - ae / b)
    return val, d_mean, d_logb


def laplace_nll_2d(pred: PredictionGrid, t: TargetGrid, cfg: LossConfig = LossConfig()):
    grad = np.zeros_like(pred.raw)
    fg = t.fg
    nf = int(fg.sum())
    if nf == 0:
        return 0.0, grad
    val, dm, db = _laplace_terms(pred.raw[fg, SL_MEAN2D], pred.raw[fg, SL_LOGB2D], t.t2d[fg], cfg.b_min)
    grad[fg, SL_MEAN2D] = dm / nf
    grad[fg, SL_LOGB2D] = db / nf
    return float(val.sum() / nf), grad


def laplace_nll_3d(pred: PredictionGrid, t: TargetGrid, cfg: LossConfig = LossConfig()):
    """Laplacian NLL over the projected centroid offsets and the 3D extents.

    The range delta ``dd`` gets its own Laplacian term when
    ``cfg.dd_laplace`` is set, otherwise a plain L1 term.
    """
    grad = np.zeros_like(pred.raw)
    fg = t.fg
    nf = int(fg.sum())
    if nf == 0:
        return 0.0, grad
    mean = pred.raw[fg, SL_MEAN3D]
    logb = pred.raw[fg, SL_LOGB3D]
    tgt = t.t3d[fg]
    cols = _LAPLACE_3D if not cfg.dd_laplace else np.arange(6)
    val, dm, db = _laplace_terms(mean[:, cols], logb[:, cols], tgt[:, cols], cfg.b_min)
    total = val.sum()
    g_mean = np.zeros_like(mean)
    g_logb = np.zeros_like(logb)
    g_mean[:, cols] = dm
    g_logb[:, cols] = db
    if not cfg.dd_laplace:
        e = tgt[:, _DD] - mean[:, _DD]
        total += np.abs(e).sum()
        g_mean[:, _DD] = -np.sign(e)
    grad[fg, SL_MEAN3D] = g_mean / nf
    grad[fg, SL_LOGB3D] = g_logb / nf
    return float(total / nf), grad


def orientation_l1(pred: PredictionGrid, t: TargetGrid, cfg: LossConfig = LossConfig()):
    grad = np.zeros_like(pred.raw)
    fg = t.fg
    nf = int(fg.sum())
    if nf == 0:
        return 0.0, grad
    e = pred.raw[fg, SL_CS] - t.cs[fg]
    grad[fg, SL_CS] = np.sign(e) / nf
    return float(np.abs(e).sum() / nf), grad


def total_loss(pred: PredictionGrid, t: TargetGrid, cfg: LossConfig = LossConfig()):
    """Class + 2D + 3D (orientation folded into 3D), unweighted.

    Returns ``(total, grad, parts)`` with ``parts`` holding the
    ``class``, ``2d`` and ``3d`` components.
    """
    lc, gc = focal_loss(pred, t, cfg)
    l3, g3 = laplace_nll_3d(pred, t, cfg)
    lo, go = orientation_l1(pred, t, cfg)
    grad = gc + g3 + go
    if cfg.supervise_2d:
        l2, g2 = laplace_nll_2d(pred, t, cfg)
        grad += g2
    else:
        l2 = 0.0
    parts = {"class": lc, "2d": l2, "3d": l3 + lo}
    return lc + l2 + (l3 + lo), grad, parts

