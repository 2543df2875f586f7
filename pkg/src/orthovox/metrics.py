"""Pose and detection metrics: MPJPE, AP_K, PCP3D and BEV box statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .scenecam import CMU15, PoseSkeleton

AP_THRESHOLDS = (25.0, 50.0, 100.0, 150.0)


def _joints(p) -> np.ndarray:
    if isinstance(p, PoseSkeleton):
        return p.joints
    if hasattr(p, "joints"):
        return np.asarray(p.joints, dtype=np.float64)
    return np.asarray(p, dtype=np.float64)


def _valid(g) -> np.ndarray:
    return g.valid if isinstance(g, PoseSkeleton) else np.ones(len(_joints(g)), dtype=bool)


def pose_error(pred, gt) -> float:
    """Mean joint distance (mm) over the GT's valid joints."""
    v = _valid(gt)
    d = np.linalg.norm(_joints(pred)[v] - _joints(gt)[v], axis=1)
    return float(d.mean()) if d.size else float("inf")


def _error_matrix(preds, gts) -> np.ndarray:
    return np.array([[pose_error(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def mpjpe(preds: Sequence, gts: Sequence) -> float:
    """Each prediction paired with its nearest GT pose; mean of those errors.

    NaN when there is nothing to pair.
    """
    if not preds or not gts:
        return float("nan")
    return float(_error_matrix(preds, gts).min(axis=1).mean())


def _ap_from_ranked(tp: np.ndarray, total_gt: int) -> float:
    if total_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / total_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_k_frames(frames: Sequence[tuple[Sequence, Sequence[float], Sequence]], k_mm: float) -> float:
    """AP over ``(preds, scores, gts)`` frames.

    Predictions are ranked by score across all frames (stable for ties). A
    prediction is a true positive when its nearest GT pose is within
    ``k_mm`` and not already claimed by a higher-ranked prediction.
    """
    entries = []  # (score, frame, nearest gt, error)
    total_gt = 0
    for f, (preds, scores, gts) in enumerate(frames):
        total_gt += len(gts)
        if not preds:
            continue
        if not gts:
            entries += [(float(s), f, -1, np.inf) for s in scores]
            continue
        err = _error_matrix(preds, gts)
        for p, s in enumerate(scores):
            g = int(np.argmin(err[p]))
            entries.append((float(s), f, g, float(err[p, g])))
    order = sorted(range(len(entries)), key=lambda n: -entries[n][0])
    claimed = set()
    tp = np.zeros(len(entries))
    for rank, n in enumerate(order):
        _, f, g, e = entries[n]
        if g >= 0 and e <= k_mm and (f, g) not in claimed:
            claimed.add((f, g))
            tp[rank] = 1.0
    return _ap_from_ranked(tp, total_gt)


def ap_k(preds_with_scores: Sequence[tuple[object, float]], gts: Sequence, k_mm: float) -> float:
    preds = [p for p, _ in preds_with_scores]
    scores = [s for _, s in preds_with_scores]
    return ap_k_frames([(preds, scores, gts)], k_mm)


def limb_correct(pred, gt, limbs, variant: str = "mean") -> np.ndarray:
    """Per-limb correctness against half the GT limb length (inclusive)."""
    pj, gj = _joints(pred), _joints(gt)
    out = np.zeros(len(limbs), dtype=bool)
    for n, (a, b) in enumerate(limbs):
        half = 0.5 * np.linalg.norm(gj[a] - gj[b])
        ea = np.linalg.norm(pj[a] - gj[a])
        eb = np.linalg.norm(pj[b] - gj[b])
        if variant == "mean":
            out[n] = (ea + eb) / 2.0 <= half
        elif variant == "both":
            out[n] = ea <= half and eb <= half
        else:
            raise ValueError(f"unknown PCP variant {variant!r}")
    return out


def pcp_per_gt(preds: Sequence, gts: Sequence, limbs=CMU15.limbs, variant: str = "mean") -> list[float]:
    """Each GT paired with its closest prediction; false positives are ignored."""
    out = []
    for g in gts:
        if not preds:
            out.append(0.0)
            continue
        best = min(preds, key=lambda p: pose_error(p, g))
        out.append(float(limb_correct(best, g, limbs, variant).mean()))
    return out


def pcp3d(preds: Sequence, gts: Sequence, limbs=CMU15.limbs, variant: str = "mean") -> float:
    scores = pcp_per_gt(preds, gts, limbs, variant)
    return float(np.mean(scores)) if scores else float("nan")


# --------------------------------------------------------------------------
# boxes
# --------------------------------------------------------------------------

def bev_iou(center_a, size_a, center_b, size_b) -> float:
    lo = np.maximum(np.asarray(center_a[:2]) - np.asarray(size_a) / 2, np.asarray(center_b[:2]) - np.asarray(size_b) / 2)
    hi = np.minimum(np.asarray(center_a[:2]) + np.asarray(size_a) / 2, np.asarray(center_b[:2]) + np.asarray(size_b) / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(size_a) + np.prod(size_b)) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    center_errors: list = field(default_factory=list)
    ious: list = field(default_factory=list)

    def add(self, other: "DetectionCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.center_errors += other.center_errors
        self.ious += other.ious

    def summary(self) -> tuple[float, float, float, float]:
        err = float(np.mean(self.center_errors)) if self.center_errors else float("nan")
        precision = self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")
        recall = self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")
        iou = float(np.mean(self.ious)) if self.ious else float("nan")
        return err, precision, recall, iou


def match_detections(boxes: Sequence, gt_boxes: Sequence, match_radius_mm: float = 500.0) -> DetectionCounts:
    """Greedy by descending score: each box claims the nearest free GT within the radius.

    Distances are horizontal (ground-plane) center distances.
    """
    order = sorted(range(len(boxes)), key=lambda n: -boxes[n].score)
    free = set(range(len(gt_boxes)))
    c = DetectionCounts()
    for n in order:
        b = boxes[n]
        best, best_d = None, np.inf
        for g in sorted(free):
            d = float(np.linalg.norm(np.asarray(b.center[:2]) - np.asarray(gt_boxes[g].center[:2])))
            if d < best_d:
                best, best_d = g, d
        if best is not None and best_d <= match_radius_mm:
            free.discard(best)
            c.tp += 1
            c.center_errors.append(best_d)
            c.ious.append(bev_iou(b.center, b.size_xy, gt_boxes[best].center, gt_boxes[best].size_xy))
        else:
            c.fp += 1
    c.fn = len(free)
    return c


def detection_metrics(boxes: Sequence, gt_boxes: Sequence,
                      match_radius_mm: float = 500.0) -> tuple[float, float, float, float]:
    """``(mean_center_error_mm, precision, recall, mean_iou)``."""
    return match_detections(boxes, gt_boxes, match_radius_mm).summary()


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _nan_to_none(obj):
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


@dataclass
class EvalReport:
    frames: int = 0
    gt_persons: int = 0
    predictions: int = 0
    mpjpe_mm: float = float("nan")
    ap: dict = field(default_factory=dict)
    pcp_avg: float = float("nan")
    pcp_per_actor: dict = field(default_factory=dict)
    mean_center_error_mm: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    mean_iou: float = float("nan")
    config_digest: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap"] = {str(int(k)) if float(k).is_integer() else str(k): v for k, v in self.ap.items()}
        d["pcp_per_actor"] = {str(k): v for k, v in self.pcp_per_actor.items()}
        return d

    def to_text(self) -> str:
        """Strict JSON: undefined values (NaN) are written as ``null``."""
        return json.dumps(_nan_to_none(self.to_dict()), indent=2, sort_keys=True, allow_nan=False)

    def csv_rows(self) -> list[tuple[str, float]]:
        rows = [("frames", self.frames), ("gt_persons", self.gt_persons), ("predictions", self.predictions),
                ("mpjpe_mm", self.mpjpe_mm)]
        rows += [(f"ap{int(k)}", v) for k, v in sorted(self.ap.items())]
        rows += [("pcp_avg", self.pcp_avg)]
        rows += [(f"pcp_actor{k}", v) for k, v in sorted(self.pcp_per_actor.items())]
        rows += [("mean_center_error_mm", self.mean_center_error_mm), ("precision", self.precision),
                 ("recall", self.recall), ("mean_iou", self.mean_iou)]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "config_digest"])
        for name, value in self.csv_rows():
            w.writerow([name, repr(float(value)) if isinstance(value, float) else value, self.config_digest])
        return buf.getvalue()


@dataclass
class FrameResult:
    poses: list  # predicted (K, 3) arrays or FusedPose
    scores: list
    boxes: list  # Detection3D
    gt_poses: list  # PoseSkeleton
    gt_boxes: list  # Detection3D-like with center and size_xy


def evaluate(results: Sequence[FrameResult], ap_thresholds=AP_THRESHOLDS, match_radius_mm: float = 500.0,
             pcp_variant: str = "mean", limbs=CMU15.limbs, config_digest: str = "") -> EvalReport:
    rep = EvalReport(frames=len(results), config_digest=config_digest)
    errs = []
    counts = DetectionCounts()
    actor_scores: dict[int, list[float]] = {}
    for r in results:
        rep.gt_persons += len(r.gt_poses)
        rep.predictions += len(r.poses)
        if r.poses and r.gt_poses:
            errs.extend(_error_matrix(r.poses, r.gt_poses).min(axis=1))
        for a, s in enumerate(pcp_per_gt(r.poses, r.gt_poses, limbs, pcp_variant)):
            actor_scores.setdefault(a, []).append(s)
        counts.add(match_detections(r.boxes, r.gt_boxes, match_radius_mm))
    rep.mpjpe_mm = float(np.mean(errs)) if errs else float("nan")
    frames = [(r.poses, r.scores, r.gt_poses) for r in results]
    rep.ap = {float(k): ap_k_frames(frames, k) for k in ap_thresholds}
    rep.pcp_per_actor = {a: float(np.mean(v)) for a, v in sorted(actor_scores.items())}
    all_pcp = [s for v in actor_scores.values() for s in v]
    rep.pcp_avg = float(np.mean(all_pcp)) if all_pcp else float("nan")
    rep.mean_center_error_mm, rep.precision, rep.recall, rep.mean_iou = counts.summary()
    return rep
