"""Detection matching, precision-recall, average precision, and 0-1 error.

Boxes are continuous (x, y, w, h) rects. Matching follows the standard
greedy detection protocol: detections in descending score order each claim
the highest-overlap unmatched ground-truth box at IoU >= 0.5; boxes flagged
difficult neither count as positives nor penalize.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidAnnotationError, UndefinedMetricError

IGNORED = -1  # matched a difficult ground-truth box


@dataclass
class GroundTruth:
    image_id: str
    boxes: list  # of (x, y, w, h)
    difficult: list = field(default_factory=list)

    def __post_init__(self):
        if not self.difficult:
            self.difficult = [False] * len(self.boxes)
        if len(self.difficult) != len(self.boxes):
            raise InvalidAnnotationError("difficult flags do not align with boxes")
        for b in self.boxes:
            if b[2] <= 0 or b[3] <= 0:
                raise InvalidAnnotationError(f"non-positive box area: {b}")

    @property
    def n_positive(self) -> int:
        return sum(1 for d in self.difficult if not d)


def iou(a, b) -> float:
    """Intersection-over-union of two (x, y, w, h) rects."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise InvalidAnnotationError("iou requires positive-area rects")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


def match_detections(detections, gt: GroundTruth, iou_thresh: float = 0.5) -> np.ndarray:
    """Label score-sorted detections 1 (TP), 0 (FP), or -1 (difficult match).

    ``detections`` is a sequence of (box, score) pairs sorted by descending
    score; the caller's order breaks score ties. Each ground-truth box is
    claimed at most once; the highest-IoU unmatched box wins (earlier box
    on exact IoU ties).
    """
    scores = [float(s) for _, s in detections]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise InvalidAnnotationError("detections must be sorted by descending score")

    taken = [False] * len(gt.boxes)
    labels = np.zeros(len(detections), dtype=np.int8)
    for i, (box, _) in enumerate(detections):
        best_ov, best_j = 0.0, -1
        for j, gbox in enumerate(gt.boxes):
            ov = iou(box, gbox)
            if ov > best_ov:
                best_ov, best_j = ov, j
        if best_j >= 0 and best_ov >= iou_thresh:
            if gt.difficult[best_j]:
                labels[i] = IGNORED
            elif not taken[best_j]:
                labels[i] = 1
                taken[best_j] = True
            else:
                labels[i] = 0
        else:
            labels[i] = 0
    return labels


def pr_curve(labels, n_pos: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each kept detection, ignored labels dropped."""
    if n_pos < 1:
        raise UndefinedMetricError("precision-recall undefined with no positives")
    kept = np.asarray([v for v in np.asarray(labels).ravel() if v != IGNORED], dtype=np.float64)
    if kept.size == 0:
        return np.zeros(0), np.zeros(0)
    tp = np.cumsum(kept)
    fp = np.cumsum(1.0 - kept)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return recall, precision


def average_precision(labels, n_pos: int, eleven_point: bool = False) -> float:
    """Area under the PR curve with a monotone precision envelope.

    ``labels`` are 1/0/-1 in rank order (see match_detections); -1 entries
    are excluded from both numerator and denominator. With eleven_point the
    legacy mean-of-max-precision at recalls {0, 0.1, ..., 1} is used.
    """
    if n_pos < 1:
        raise UndefinedMetricError("average precision undefined with n_pos = 0")
    recall, precision = pr_curve(labels, n_pos)
    if recall.size == 0:
        return 0.0

    if eleven_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            p = float(np.max(precision[mask])) if np.any(mask) else 0.0
            ap += p / 11.0
        return ap

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def zero_one_error(predictions, labels) -> int:
    """Count of positions where predictions and labels disagree."""
    predictions = np.asarray(predictions).ravel()
    labels = np.asarray(labels).ravel()
    if predictions.size != labels.size:
        raise InvalidAnnotationError(
            f"length mismatch: {predictions.size} predictions vs {labels.size} labels"
        )
    return int(np.sum(predictions != labels))


def sort_detection_records(records) -> list:
    """Order (image_id, box, score) records by descending score.

    Ties are broken by content (image_id, then box coords), so evaluation
    does not depend on the order detections arrive in.
    """
    return sorted(
        records,
        key=lambda r: (-float(r[2]), str(r[0]), tuple(float(v) for v in r[1])),
    )


def evaluate_detections(records, ground_truths, iou_thresh: float = 0.5,
                        eleven_point: bool = False) -> tuple[float, np.ndarray, int]:
    """Score a detection set against per-image ground truth.

    ``records`` are (image_id, box, score) triples in any order;
    ``ground_truths`` maps image_id to GroundTruth. Returns (ap, labels in
    global rank order, total positives). Images absent from ground_truths
    contribute only false positives.
    """
    ranked = sort_detection_records(records)
    n_pos = sum(g.n_positive for g in ground_truths.values())

    per_image: dict = {}
    for rec in ranked:
        per_image.setdefault(str(rec[0]), []).append(rec)
    labels_by_key: dict = {}
    for image_id, recs in per_image.items():
        gt = ground_truths.get(image_id, GroundTruth(image_id=image_id, boxes=[]))
        lab = match_detections([(r[1], r[2]) for r in recs], gt, iou_thresh)
        for r, v in zip(recs, lab):
            labels_by_key[id(r)] = int(v)
    labels = np.asarray([labels_by_key[id(r)] for r in ranked], dtype=np.int8)

    if n_pos == 0:
        raise UndefinedMetricError("no positive ground truth to evaluate against")
    return average_precision(labels, n_pos, eleven_point=eleven_point), labels, n_pos


def load_ground_truth(path) -> list[GroundTruth]:
    """Read ground truth JSON: a list of {image_id, boxes:[{x,y,w,h,difficult}]}."""
    with open(path) as f:
        raw = json.load(f)
    out = []
    for entry in raw:
        boxes = [(b["x"], b["y"], b["w"], b["h"]) for b in entry["boxes"]]
        difficult = [bool(b.get("difficult", False)) for b in entry["boxes"]]
        out.append(GroundTruth(image_id=entry["image_id"], boxes=boxes, difficult=difficult))
    return out


def save_ground_truth(gts, path) -> None:
    raw = [
        {
            "image_id": g.image_id,
            "boxes": [
                {"x": b[0], "y": b[1], "w": b[2], "h": b[3], "difficult": bool(d)}
                for b, d in zip(g.boxes, g.difficult)
            ],
        }
        for g in gts
    ]
    with open(path, "w") as f:
        json.dump(raw, f, indent=1)


def write_pr_csv(labels, n_pos: int, path) -> None:
    """Emit the PR curve as CSV with recall, precision columns."""
    recall, precision = pr_curve(labels, n_pos)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["recall", "precision"])
        for r, p in zip(recall, precision):
            writer.writerow([repr(float(r)), repr(float(p))])
