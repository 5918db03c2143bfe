# evaluation/metrics.py
"""Detection metrics: oriented-box IoU, greedy matching, interpolated AP and
per-class / per-region reports for the entire area (EA) and the driving
corridor (RoI)."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from data.geometry import RangeSpec, RigidTransform
from evaluation.boxes import CLASSES
from utils.errors import ConfigError, ContractError

REGIONS = ("entire_area", "roi")
DEFAULT_THRESHOLDS = {"car": 0.5, "pedestrian": 0.25, "cyclist": 0.25}


def default_roi():
    return RangeSpec(0.0, 25.0, -4.0, 4.0)


@dataclass(frozen=True)
class EvalConfig:
    """``roi_transform`` maps box centres into the frame the corridor is defined in."""
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    roi: RangeSpec = field(default_factory=default_roi)
    ea_range: Optional[RangeSpec] = None
    iou_mode: str = "bev"
    recall_points: int = 40
    roi_transform: Optional[RigidTransform] = None

    def __post_init__(self):
        for label, t in self.thresholds.items():
            if label not in CLASSES:
                raise ConfigError(f"threshold given for unknown class '{label}'")
            if not 0.0 < t <= 1.0:
                raise ConfigError(f"IoU threshold for {label} must lie in (0, 1], got {t}")
        missing = [c for c in CLASSES if c not in self.thresholds]
        if missing:
            raise ConfigError(f"missing IoU thresholds for {missing}")
        if self.iou_mode not in ("bev", "3d"):
            raise ConfigError(f"iou_mode must be 'bev' or '3d', got '{self.iou_mode}'")
        if self.recall_points not in (11, 40):
            raise ConfigError(f"recall_points must be 11 or 40, got {self.recall_points}")

    def iou_fn(self):
        return rotated_iou_bev if self.iou_mode == "bev" else iou_3d


# --- IoU ---
def _box_key(box):
    return (box.x, box.y, box.z, box.w, box.l, box.h, box.theta, box.label)


def _check_box(box):
    if box.is_degenerate():
        raise ContractError(f"degenerate box with extents w={box.w}, l={box.l}, h={box.h}")


def _bev_intersection(a, b):
    _check_box(a)
    _check_box(b)
    # fixed operand order so IoU(a, b) and IoU(b, a) are bit-identical
    if _box_key(b) < _box_key(a):
        a, b = b, a
    return a.polygon().intersection(b.polygon()).area, a, b


def rotated_iou_bev(a, b):
    inter, a, b = _bev_intersection(a, b)
    union = a.bev_area + b.bev_area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(a, b):
    """BEV overlap times vertical overlap, over the union of volumes."""
    inter_bev, a, b = _bev_intersection(a, b)
    overlap_z = max(0.0, min(a.top, b.top) - max(a.bottom, b.bottom))
    inter = inter_bev * overlap_z
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


# --- Region filtering ---
def filter_region(boxes, region, config):
    """Keep boxes whose centre lies in the region: open corridor bounds for
    'roi', the optional annotated range (else everything) for 'entire_area'."""
    if region not in REGIONS:
        raise ValueError(f"unknown region '{region}', expected one of {REGIONS}")
    boxes = list(boxes)
    if not boxes:
        return []
    centers = np.array([[b.x, b.y, b.z] for b in boxes])
    if region == "entire_area":
        if config.ea_range is None:
            return boxes
        keep = config.ea_range.contains(centers)
    else:
        if config.roi_transform is not None:
            centers = config.roi_transform.apply_xyz(centers)
        keep = config.roi.contains(centers, strict=True)
    return [b for b, k in zip(boxes, keep) if k]


# --- Matching and AP ---
@dataclass
class MatchResult:
    scores: np.ndarray
    tp: np.ndarray
    num_gt: int

    @property
    def tp_count(self):
        return int(self.tp.sum())

    @property
    def fp_count(self):
        return int(len(self.tp) - self.tp.sum())

    @property
    def fn_count(self):
        return self.num_gt - self.tp_count


def match_detections(dets, gts, threshold, iou_fn=rotated_iou_bev):
    """Greedy matching in descending score; each GT is matched at most once
    and a detection is a TP when its best free GT overlaps above ``threshold``.

    Score ties are broken by the higher best-IoU, then by box coordinates,
    so the result does not depend on the input order.
    """
    gts = sorted(gts, key=_box_key)
    ious = np.array([[iou_fn(d, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))
    best = ious.max(axis=1) if len(gts) else np.zeros(len(dets))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, -best[i], _box_key(dets[i])))
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        if not len(gts):
            break
        candidates = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(candidates))
        if candidates[j] > threshold:
            taken[j] = True
            tp[rank] = True
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    return MatchResult(scores, tp, len(gts))


def interpolated_ap(tp, num_gt, recall_points=40):
    """Mean over the sampled recall levels of the best precision reached at
    or beyond each level (R40: 1/40..1, R11: 0, 0.1, ..., 1)."""
    if num_gt == 0:
        return None
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.arange(1, tp.size + 1)
    if recall_points == 40:
        levels = np.arange(1, 41) / 40.0
    else:
        levels = np.arange(11) / 10.0
    total = 0.0
    for r in levels:
        reached = precision[recall >= r - 1e-12]
        total += float(reached.max()) if reached.size else 0.0
    return total / len(levels)


def _check_labels(boxes, what):
    for box in boxes:
        if box.label not in CLASSES:
            raise ValueError(f"{what} carries unknown class label '{box.label}'")


def _match_class(dets, gts, label, config):
    dets = [d for d in dets if d.label == label]
    gts = [g for g in gts if g.label == label]
    for d in dets:
        if d.score is None:
            raise ContractError("detections must carry a score")
    return match_detections(dets, gts, config.thresholds[label], config.iou_fn())


def average_precision(dets, gts, label, config):
    """AP for one class; None when the class has no ground truth."""
    result = _match_class(dets, gts, label, config)
    return interpolated_ap(result.tp, result.num_gt, config.recall_points)


# --- Report ---
@dataclass
class EvalReport:
    ap: dict
    mean_ap: dict
    counts: dict
    iou_mode: str = "bev"
    recall_points: int = 40
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "schema": 1,
            "ap": self.ap,
            "mAP": self.mean_ap,
            "counts": self.counts,
            "iou_mode": self.iou_mode,
            "recall_points": self.recall_points,
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    def as_frame(self):
        """One row per region, one column per class plus mAP (percent)."""
        rows = {}
        for region in REGIONS:
            row = {c: (None if self.ap[region][c] is None else 100.0 * self.ap[region][c]) for c in CLASSES}
            row["mAP"] = None if self.mean_ap[region] is None else 100.0 * self.mean_ap[region]
            rows[region] = row
        return pd.DataFrame.from_dict(rows, orient="index")


def merge_matches(results):
    """Pool per-frame matches into one ranking by descending score."""
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    return MatchResult(scores[order], tp[order], sum(r.num_gt for r in results))


def evaluate(dets, gts, config=None):
    return evaluate_frames([(dets, gts)], config)


def evaluate_frames(frames, config=None):
    """Evaluate (detections, ground truth) pairs, matching within each frame
    and ranking detections across all frames."""
    config = EvalConfig() if config is None else config
    frames = [(list(d), list(g)) for d, g in frames]
    for dets, gts in frames:
        _check_labels(dets, "detection")
        _check_labels(gts, "ground truth")
    ap, mean_ap, counts = {}, {}, {}
    for region in REGIONS:
        regional = [(filter_region(d, region, config), filter_region(g, region, config)) for d, g in frames]
        ap[region], counts[region] = {}, {}
        for label in CLASSES:
            result = merge_matches([_match_class(d, g, label, config) for d, g in regional])
            ap[region][label] = interpolated_ap(result.tp, result.num_gt, config.recall_points)
            counts[region][label] = {"tp": result.tp_count, "fp": result.fp_count, "fn": result.fn_count}
        present = [v for v in ap[region].values() if v is not None]
        mean_ap[region] = float(np.mean(present)) if present else None
    return EvalReport(ap, mean_ap, counts, config.iou_mode, config.recall_points)
