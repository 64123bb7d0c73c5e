"""Sliding-window detection over feature pyramids plus greedy NMS.

Scores come from the model's dense response maps; calibrated probability
is used when the model carries a sigmoid fit, raw margin otherwise. Boxes
are the root filter extent mapped back to original-image pixels through
each level's scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .evaluate import iou
from .features import FeaturePyramid
from .models import MixtureModel, StarModel, Template
from .partmodel import score_dpm, score_edpm, score_epm, template_response


@dataclass
class Detection:
    bbox: tuple  # (x, y, w, h) original-image pixels
    score: float
    level: int
    mixture_or_exemplar: int = 0
    placements: np.ndarray | None = None   # (P, 2) cell coords in the level
    deformations: np.ndarray | None = None  # (P-1, 2) of (dy, dx), dpm/edpm
    image_id: str = ""


def _emit_locations(scores, threshold):
    """(y, x) indices above threshold in raster order."""
    ys, xs = np.where(scores > threshold)
    return list(zip(ys.tolist(), xs.tolist()))


def _clip_box(box, extent):
    if extent is None:
        return box
    H, W = extent
    x, y, w, h = box
    x0 = min(max(x, 0.0), W)
    y0 = min(max(y, 0.0), H)
    x1 = min(max(x + w, 0.0), W)
    y1 = min(max(y + h, 0.0), H)
    return (x0, y0, x1 - x0, y1 - y0)


def _calibrated(model, raw):
    if model.platt is None:
        return raw
    return model.platt.prob(raw)


def detect(model, pyramid: FeaturePyramid, threshold: float) -> list[Detection]:
    """All root placements scoring above threshold, (level, raster) order.

    Accepts a Template, a MixtureModel, or any StarModel variant. Levels
    too small for the model's root window are skipped. Boxes are clipped
    to the level-0 lattice extent.
    """
    if isinstance(model, Template):
        model = MixtureModel(templates=[model])
    out = []
    extent = None
    if pyramid.levels:
        g0 = pyramid.levels[0]
        extent = ((g0.rows + 2 * g0.border) * g0.cell_size / g0.scale,
                  (g0.cols + 2 * g0.border) * g0.cell_size / g0.scale)

    for li, grid in enumerate(pyramid.levels):
        if isinstance(model, MixtureModel):
            shapes = {t.shape[:2] for t in model.templates}
            if len(shapes) == 1:
                # aligned windows: score is the pointwise max over components
                h, w = next(iter(shapes))
                if grid.rows < h or grid.cols < w:
                    continue
                best = None
                best_id = None
                for tpl in model.templates:
                    resp = _calibrated(tpl, template_response(tpl, grid))
                    if best is None:
                        best = resp.copy()
                        best_id = np.full(resp.shape, tpl.mixture_id,
                                          dtype=np.int64)
                    else:
                        improved = resp > best
                        best = np.where(improved, resp, best)
                        best_id = np.where(improved, tpl.mixture_id, best_id)
                for (y, x) in _emit_locations(best, threshold):
                    out.append(Detection(
                        bbox=_clip_box(grid.cell_to_pixel_box(y, x, h, w),
                                       extent),
                        score=float(best[y, x]),
                        level=li,
                        mixture_or_exemplar=int(best_id[y, x]),
                    ))
            else:
                # mixed window sizes: emit per component, NMS arbitrates
                for tpl in model.templates:
                    h, w = tpl.shape[:2]
                    if grid.rows < h or grid.cols < w:
                        continue
                    resp = _calibrated(tpl, template_response(tpl, grid))
                    for (y, x) in _emit_locations(resp, threshold):
                        out.append(Detection(
                            bbox=_clip_box(grid.cell_to_pixel_box(y, x, h, w),
                                           extent),
                            score=float(resp[y, x]),
                            level=li,
                            mixture_or_exemplar=tpl.mixture_id,
                        ))
            continue

        if not isinstance(model, StarModel):
            raise ValidationError(f"cannot detect with {type(model).__name__}")
        rh, rw = model.parts[0].dims
        if grid.rows < rh or grid.cols < rw:
            continue
        if any(grid.rows < p.dims[0] or grid.cols < p.dims[1]
               for p in model.parts):
            continue
        if model.variant == "dpm":
            raw, placements = score_dpm(model, grid)
            best_m = None
        elif model.variant == "epm":
            raw, best_m = score_epm(model, grid)
            placements = None
        else:
            raw, best_m, placements = score_edpm(model, grid)
        scores = _calibrated(model, raw)
        scores = np.where(np.isfinite(raw), scores, -np.inf)
        for (y, x) in _emit_locations(scores, threshold):
            m = int(best_m[y, x]) if best_m is not None else 0
            if placements is not None:
                pl = placements[y, x].copy()
            else:
                root = np.array([y, x], dtype=np.int64)
                pl = np.vstack([root[None, :], root + model.anchor_sets[m]])
            deform = None
            if model.variant in ("dpm", "edpm") and model.P > 1:
                anchors = model.anchors if model.variant == "dpm" \
                    else model.anchor_sets[m]
                deform = pl[1:] - pl[0] - anchors
            out.append(Detection(
                bbox=_clip_box(grid.cell_to_pixel_box(y, x, rh, rw), extent),
                score=float(scores[y, x]),
                level=li,
                mixture_or_exemplar=m,
                placements=pl,
                deformations=deform,
            ))
    return out


def nms(detections: list[Detection], overlap_thresh: float = 0.5) -> list[Detection]:
    """Greedy non-maximum suppression by descending score.

    Score ties keep the earlier detection in the input order. Every
    surviving pair has IoU <= overlap_thresh.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    kept = []
    for i in order:
        cand = detections[i]
        if all(iou(cand.bbox, k.bbox) <= overlap_thresh for k in kept):
            kept.append(cand)
    return kept


def detection_to_record(det: Detection, model_ref: str) -> dict:
    return {
        "image_id": det.image_id,
        "bbox": [float(v) for v in det.bbox],
        "score": float(det.score),
        "model_ref": model_ref,
        "exemplar": int(det.mixture_or_exemplar),
        "deformations": None if det.deformations is None
        else [[int(a), int(b)] for a, b in det.deformations],
    }


def write_detections(path, detections, model_ref: str) -> None:
    """One JSON object per line; floats kept at full repr precision."""
    with open(path, "w") as fh:
        for det in detections:
            fh.write(json.dumps(detection_to_record(det, model_ref)) + "\n")


def load_detections(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
