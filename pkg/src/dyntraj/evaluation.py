"""Instance, trajectory and prediction metrics.

Thresholds are strict: a pair at exactly the threshold distance is not a true
positive. Precision with no detections is 0 (1 when there is no ground truth
either); recall with no ground truth is 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matching import km_assign

INSTANCE_THRESHOLD = 1.5
TRAJECTORY_THRESHOLD = 1.5
NO_OVERLAP_COST = 1e9


@dataclass
class MatchReport:
    precision: float
    recall: float
    n_true_positive: int
    n_detected: int
    n_gt: int

    def as_dict(self):
        return dict(precision=self.precision, recall=self.recall, n_true_positive=self.n_true_positive,
                    n_detected=self.n_detected, n_gt=self.n_gt)


def _ratios(tp, n_det, n_gt):
    if n_det == 0:
        precision = 1.0 if n_gt == 0 else 0.0
    else:
        precision = tp / n_det
    recall = 1.0 if n_gt == 0 else tp / n_gt
    return precision, recall


def count_true_positives(cost, threshold):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return 0
    return sum(1 for i, j in km_assign(cost) if cost[i, j] < threshold)


def match_points(detected, gt, threshold=INSTANCE_THRESHOLD) -> MatchReport:
    """One frame: KM on Euclidean distance, TP when distance < threshold."""
    det = np.asarray(detected, dtype=np.float64).reshape(-1, 2)
    ref = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    cost = np.linalg.norm(det[:, None] - ref[None], axis=-1).reshape(len(det), len(ref))
    tp = count_true_positives(cost, threshold)
    p, r = _ratios(tp, len(det), len(ref))
    return MatchReport(p, r, tp, len(det), len(ref))


def instance_pr(detected, gt, threshold=INSTANCE_THRESHOLD, frames=None) -> MatchReport:
    """Ins-Precision / Ins-Recall averaged over frames.

    `detected` and `gt` map frame_id -> (N, 2) points in the same (world)
    coordinates. Frames evaluated are `frames` if given, else those in `detected`.
    Counts in the report are totals over frames.
    """
    frames = sorted(detected) if frames is None else list(frames)
    if not frames:
        return MatchReport(1.0, 1.0, 0, 0, 0)
    reports = [match_points(detected.get(f, np.zeros((0, 2))), gt.get(f, np.zeros((0, 2))), threshold)
               for f in frames]
    return MatchReport(
        float(np.mean([r.precision for r in reports])),
        float(np.mean([r.recall for r in reports])),
        sum(r.n_true_positive for r in reports),
        sum(r.n_detected for r in reports),
        sum(r.n_gt for r in reports),
    )


def track_distance(a, b):
    """Mean Euclidean distance over shared frames; tracks are (frame_ids, (L, 2) xy)."""
    fa, xa = a
    fb, xb = b
    common, ia, ib = np.intersect1d(np.asarray(fa), np.asarray(fb), return_indices=True)
    if len(common) == 0:
        return NO_OVERLAP_COST
    return float(np.linalg.norm(np.asarray(xa)[ia] - np.asarray(xb)[ib], axis=1).mean())


def trajectory_pr(extracted, gt, threshold=TRAJECTORY_THRESHOLD) -> MatchReport:
    """Gen-Precision / Gen-Recall. Inputs are lists of (frame_ids, (L, 2) xy) tracks."""
    extracted, gt = list(extracted), list(gt)
    cost = np.array([[track_distance(e, g) for g in gt] for e in extracted]).reshape(len(extracted), len(gt))
    tp = count_true_positives(cost, threshold)
    p, r = _ratios(tp, len(extracted), len(gt))
    return MatchReport(p, r, tp, len(extracted), len(gt))


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if len(pred) == 0:
        raise ValueError("empty trajectories")
    return pred, gt


def ade(pred, gt):
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt):
    pred, gt = _check_pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def format_report(metrics):
    """`key: value` lines, one per metric."""
    lines = []
    for k, v in metrics.items():
        lines.append(f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}")
    return "\n".join(lines) + "\n"
