"""Range-bucketed detection metrics: BEV average precision and 2.5D max-F1.

Inputs are per-frame lists: ``dets[k]`` and ``labels[k]`` belong to the same
scene. A single frame may be passed as a flat list.

Matching is greedy per frame and class in descending score order; each
detection takes the free label it overlaps most, subject to the metric's
gate. A matched detection counts as a true positive in its label's range
bucket. An unmatched detection counts as a false positive in the bucket of
its own range. Buckets without labels are absent from the result.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .geom import iou_2d, iou_bev
from .targets import FOREGROUND_CLASSES, Detection, LinkedLabel, ObjectClass

DEFAULT_BUCKETS = ((100.0, 200.0), (200.0, 300.0), (300.0, 400.0), (400.0, 500.0))
CSV_FIELDS = ("class", "bucket_min", "bucket_max", "metric", "value")


@dataclass(frozen=True)
class EvalConfig:
    bev_iou: float = 0.1
    iou_2d: float = 0.5
    max_range_err: float = 0.10
    buckets: tuple = DEFAULT_BUCKETS
    classes: tuple = FOREGROUND_CLASSES

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.buckets)
        if not b:
            raise ValueError("at least one range bucket is required")
        for lo, hi in b:
            if not hi > lo:
                raise ValueError(f"empty bucket ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(b, b[1:]):
            if lo < hi:
                raise ValueError("buckets must be ascending and non-overlapping")
        object.__setattr__(self, "buckets", b)

    def bucket_of(self, rng: float) -> int:
        """Index of the bucket holding ``rng`` or -1. Intervals are [lo, hi), the last one closed."""
        last = len(self.buckets) - 1
        for i, (lo, hi) in enumerate(self.buckets):
            if lo <= rng < hi or (i == last and rng == hi):
                return i
        return -1


@dataclass
class _Scored:
    """Per-class, per-bucket scored outcomes pooled over frames."""

    scores: list = field(default_factory=list)
    tp: list = field(default_factory=list)
    n_pos: int = 0


def _frames(x):
    x = list(x)
    if x and isinstance(x[0], (Detection, LinkedLabel)):
        return [x]
    return [list(f) for f in x]


def _match_frame(dets, labels, gate):
    """Greedy matching. ``gate(det, label)`` returns an overlap or None.

    Returns, in the input order of ``dets``, the index of the matched label or -1.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].anchor_point_id))
    taken = [False] * len(labels)
    out = [-1] * len(dets)
    for i in order:
        best, best_ov = -1, -math.inf
        for j, lab in enumerate(labels):
            if taken[j]:
                continue
            ov = gate(dets[i], lab)
            if ov is not None and ov > best_ov:
                best, best_ov = j, ov
        if best >= 0:
            taken[best] = True
            out[i] = best
    return out


def _collect(dets, labels, cfg: EvalConfig, gate) -> dict:
    det_frames, lab_frames = _frames(dets), _frames(labels)
    # an empty flat list next to a single flat frame is one empty frame
    if not det_frames and len(lab_frames) == 1:
        det_frames = [[]]
    if not lab_frames and len(det_frames) == 1:
        lab_frames = [[]]
    if len(det_frames) != len(lab_frames):
        raise ValueError(f"{len(det_frames)} detection frames vs {len(lab_frames)} label frames")
    acc = {(c, b): _Scored() for c in cfg.classes for b in range(len(cfg.buckets))}
    for fd, fl in zip(det_frames, lab_frames):
        for c in cfg.classes:
            ds = [d for d in fd if d.cls == c]
            ls = [lab for lab in fl if lab.cls == c]
            lb = [cfg.bucket_of(lab.box3d.range) for lab in ls]
            for b in lb:
                if b >= 0:
                    acc[c, b].n_pos += 1
            for d, m in zip(ds, _match_frame(ds, ls, gate)):
                b = lb[m] if m >= 0 else cfg.bucket_of(d.box3d.range)
                if b >= 0:
                    acc[c, b].scores.append(d.score)
                    acc[c, b].tp.append(m >= 0)
    return acc


def _pr_counts(s: _Scored):
    """Cumulative TP and FP counts at each distinct score threshold, high to low.

    Grouping equal scores keeps the curve independent of input order.
    """
    if not s.scores:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    scores = np.asarray(s.scores, dtype=float)
    tp = np.asarray(s.tp, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    last = np.r_[scores[1:] != scores[:-1], True]
    return ctp[last], cfp[last]


def _ap_from_counts(ctp, cfp, n_pos: int) -> float:
    """All-points AP computed in exact rationals, rounded once."""
    prec = [Fraction(int(t), int(t + f)) for t, f in zip(ctp, cfp)]
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    ap, prev = Fraction(0), 0
    for t, p in zip(ctp, prec):
        ap += (int(t) - prev) * p
        prev = int(t)
    return float(ap / n_pos)


def _f1_from_counts(ctp, cfp, n_pos: int) -> float:
    # F1 = 2 TP / (2 TP + FP + FN) = 2 TP / (TP + FP + n_pos); one rounding per value
    if len(ctp) == 0:
        return 0.0
    return float(np.max(2 * ctp / (ctp + cfp + n_pos)))


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-points interpolated area under a PR curve with ascending recall."""
    if len(recall) == 0:
        return 0.0
    r = np.r_[0.0, recall]
    p = np.r_[precision, 0.0]
    # interpolated precision: running max from the right
    p = np.maximum.accumulate(p[::-1])[::-1][:-1]
    return float(np.sum((r[1:] - r[:-1]) * p))


def max_f1(precision: np.ndarray, recall: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return float(f1.max())


def _bev_gate(cfg: EvalConfig):
    def gate(d, lab):
        iou = iou_bev(d.box3d, lab.box3d)
        return iou if iou >= cfg.bev_iou else None
    return gate


def _gate_25d(cfg: EvalConfig):
    def gate(d, lab):
        r = lab.box3d.range
        if abs(d.box3d.range - r) / r > cfg.max_range_err:
            return None
        iou = iou_2d(d.box2d, lab.box2d)
        return iou if iou >= cfg.iou_2d else None
    return gate


def _summarize(acc: dict, cfg: EvalConfig, fn) -> dict:
    out = {}
    for (c, b), s in acc.items():
        if s.n_pos == 0:
            continue
        out[c, cfg.buckets[b]] = fn(*_pr_counts(s), s.n_pos)
    return out


def bev_ap(dets, labels, cfg: EvalConfig = EvalConfig()) -> dict:
    """AP per ``(class, bucket)`` with footprint IoU >= ``cfg.bev_iou`` as the match gate."""
    return _summarize(_collect(dets, labels, cfg, _bev_gate(cfg)), cfg, _ap_from_counts)


def max_f1_25d(dets, labels, cfg: EvalConfig = EvalConfig()) -> dict:
    """Max-F1 over score thresholds; a match needs 2D IoU and a relative range error gate."""
    return _summarize(_collect(dets, labels, cfg, _gate_25d(cfg)), cfg, _f1_from_counts)


def evaluate(dets, labels, cfg: EvalConfig = EvalConfig()) -> list[tuple]:
    """Both metrics as rows ``(class_name, bucket_min, bucket_max, metric, value)``."""
    rows = []
    for name, fn in (("bev_ap", bev_ap), ("max_f1_25d", max_f1_25d)):
        res = fn(dets, labels, cfg)
        for (c, (lo, hi)), v in sorted(res.items(), key=lambda kv: (int(kv[0][0]), kv[0][1])):
            rows.append((ObjectClass(c).name.lower(), lo, hi, name, v))
    return rows


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for cls, lo, hi, metric, v in rows:
        w.writerow((cls, f"{lo:g}", f"{hi:g}", metric, f"{v:.6f}"))
    return buf.getvalue()
