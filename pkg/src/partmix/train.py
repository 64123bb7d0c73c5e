"""Template and star-model training: hinge-loss fitting, C cross-validation,
sigmoid calibration, mixture assembly, and hard-negative mining.

Mixture components are trained independently on their cluster's positives
against one shared mined negative pool. Star models are trained jointly
over appearance and deformation parameters with annotated part placements
on positives (convex: no latent positive placements); negatives use the
model's own best placements, re-mined across rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._solver import platt_newton, solve_hinge
from .errors import DataError, InvalidAnnotationError, ValidationError
from .evaluate import average_precision
from .features import FeatureGrid, WindowDescriptor, extract_window
from .models import BETA_MIN, MixtureModel, PartFilter, PlattScaling, StarModel, Template
from .partmodel import score_dpm, template_response

PLATT_PARAM_LIMIT = 1e3


@dataclass
class TrainConfig:
    C: float = 0.01
    C_grid: tuple = ()          # empty -> default_c_grid(feature_dim)
    folds: int = 5
    neg_per_image_cap: int = 20
    convergence_tol: float = 1e-6
    mining_rounds: int = 10
    mining_threshold: float = -1.0
    neg_init_per_image: int = 5
    min_pos: int = 2
    beta_init: float = 0.05
    quantization: float = 1.0
    seed: int = 0
    max_iter: int = 500_000

    def __post_init__(self):
        if self.C <= 0:
            raise ValidationError("C must be positive")
        if self.C_grid and any(c <= 0 for c in self.C_grid):
            raise ValidationError("C_grid entries must be positive")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")


def default_c_grid(feature_dim: int) -> list[float]:
    """Regularization grid scaled by the feature dimension."""
    return [c / feature_dim for c in (0.002, 0.02, 0.2, 2.0, 20.0)]


def _stack_windows(windows):
    """Rows from WindowDescriptors, (h, w, D) arrays, or an (n, d) matrix."""
    if isinstance(windows, np.ndarray) and windows.ndim == 2:
        return np.asarray(windows, dtype=np.float64), None
    rows = []
    shape = None
    for w in windows:
        if isinstance(w, WindowDescriptor):
            rows.append(w.values)
            shape = w.shape
        else:
            arr = np.asarray(w, dtype=np.float64)
            if arr.ndim == 3:
                shape = arr.shape
            rows.append(arr.ravel())
    if not rows:
        return np.zeros((0, 0)), None
    return np.vstack(rows), shape


def train_linear(pos, neg, C: float, tol: float = 1e-6,
                 max_iter: int = 500_000, shape=None) -> Template:
    """Max-margin rigid template from positive and negative windows.

    The reported objective is the primal value 0.5||w||^2 + C sum hinge.
    Failing to converge within max_iter returns the best iterate with
    meta["converged"] = False.
    """
    X_pos, shape_p = _stack_windows(pos)
    X_neg, _ = _stack_windows(neg)
    if X_pos.shape[0] < 1 or X_neg.shape[0] < 1:
        raise DataError("need at least one positive and one negative window")
    X = np.vstack([X_pos, X_neg])
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values")
    y = np.concatenate([np.ones(X_pos.shape[0]), -np.ones(X_neg.shape[0])])
    res = solve_hinge(X, y, C, tol=tol, max_iter=max_iter)
    shape = shape or shape_p or (1, 1, X.shape[1])
    meta = {
        "objective": res["objective"],
        "dual_objective": res["dual_objective"],
        "gap": res["gap"],
        "converged": res["converged"],
        "iterations": res["iterations"],
        "n_sv": res["n_sv"],
        "C": float(C),
    }
    return Template(weights=res["w"].reshape(shape), bias=res["bias"], meta=meta)


def cross_validate_C(pos, neg, C_grid, folds: int = 5, seed: int = 0,
                     tol: float = 1e-6, max_iter: int = 500_000):
    """Pick C by mean held-out ranking AP over stratified folds.

    AP plateaus are common on separable data, so exact AP ties go to the
    smaller mean held-out hinge loss (margin quality still separates C
    values there), and remaining ties to the smaller C. Returns
    (best_C, table) where the table has one row per C plus a meta entry
    recording any fold reduction.
    """
    X_pos, _ = _stack_windows(pos)
    X_neg, _ = _stack_windows(neg)
    C_grid = sorted(float(c) for c in C_grid)
    if not C_grid:
        raise ValidationError("C_grid must be nonempty")
    n_pos, n_neg = X_pos.shape[0], X_neg.shape[0]
    requested = folds
    folds = min(folds, n_pos, n_neg)
    if folds < 2:
        raise DataError(
            f"cannot stratify {n_pos} positives / {n_neg} negatives into >= 2 folds"
        )

    rng = np.random.default_rng(seed)
    pos_fold = np.arange(n_pos) % folds
    rng.shuffle(pos_fold)
    neg_fold = np.arange(n_neg) % folds
    rng.shuffle(neg_fold)

    table = []
    best_c, best_key = None, None
    for c in C_grid:
        fold_aps = []
        fold_hinges = []
        for f in range(folds):
            tr_p = X_pos[pos_fold != f]
            tr_n = X_neg[neg_fold != f]
            te_p = X_pos[pos_fold == f]
            te_n = X_neg[neg_fold == f]
            res = solve_hinge(
                np.vstack([tr_p, tr_n]),
                np.concatenate([np.ones(len(tr_p)), -np.ones(len(tr_n))]),
                c, tol=tol, max_iter=max_iter,
            )
            scores = np.concatenate([te_p, te_n]) @ res["w"] + res["bias"]
            labels = np.concatenate([np.ones(len(te_p)), np.zeros(len(te_n))])
            signed = np.where(labels > 0, 1.0, -1.0)
            fold_hinges.append(float(np.mean(np.maximum(0.0, 1.0 - signed * scores))))
            order = np.argsort(-scores, kind="stable")
            fold_aps.append(average_precision(labels[order], n_pos=len(te_p)))
        mean_ap = float(np.mean(fold_aps))
        mean_hinge = float(np.mean(fold_hinges))
        table.append({"C": c, "fold_aps": fold_aps, "mean_ap": mean_ap,
                      "mean_hinge": mean_hinge})
        key = (mean_ap, -mean_hinge)
        if best_key is None or key > best_key:
            best_key, best_c = key, c
    meta = {"folds": folds, "requested_folds": requested, "reduced": folds != requested}
    table.append({"meta": meta})
    return best_c, table


def platt_calibrate(scores, labels) -> PlattScaling:
    """Fit the sigmoid calibration on raw scores and binary labels.

    With well-ordered scores (positives higher) the fitted slope is
    negative, so probabilities increase with the raw score. Parameters are
    clipped into a bounded range on near-separation and flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise DataError("calibration needs both classes")
    a, b, converged = platt_newton(scores, labels)
    clamped = False
    if abs(a) > PLATT_PARAM_LIMIT or abs(b) > PLATT_PARAM_LIMIT or not converged:
        a = float(np.clip(a, -PLATT_PARAM_LIMIT, PLATT_PARAM_LIMIT))
        b = float(np.clip(b, -PLATT_PARAM_LIMIT, PLATT_PARAM_LIMIT))
        clamped = True
    return PlattScaling(a=float(a), b=float(b), clamped=clamped)


def _random_windows(grid: FeatureGrid, shape, count: int, rng) -> list[tuple[int, int]]:
    """Deterministic sample of distinct window origins inside a grid."""
    h, w = shape
    max_y = grid.rows - h + 1
    max_x = grid.cols - w + 1
    if max_y <= 0 or max_x <= 0:
        return []
    n_all = max_y * max_x
    count = min(count, n_all)
    picks = rng.choice(n_all, size=count, replace=False)
    return [(int(p // max_x), int(p % max_x)) for p in np.sort(picks)]


def _harvest(resp: np.ndarray, threshold: float, cap: int) -> list[tuple[int, int]]:
    """Top-scoring map locations above threshold, score-descending order."""
    ys, xs = np.where(resp > threshold)
    if ys.size == 0:
        return []
    order = np.argsort(-resp[ys, xs], kind="stable")[:cap]
    return [(int(ys[i]), int(xs[i])) for i in order]


def train_mixture(cluster_windows, neg_grids, config: TrainConfig) -> MixtureModel:
    """One calibrated template per positive cluster, shared negative pool.

    Clusters smaller than config.min_pos are skipped and recorded in
    meta["skipped"]. The pool starts from random windows of the negative
    grids and grows by hard-negative mining rounds shared by all templates.
    """
    cluster_windows = [list(c) for c in cluster_windows]
    if not any(cluster_windows):
        raise DataError("no positive windows")
    shape = None
    for cw in cluster_windows:
        for w in cw:
            shape = w.shape if isinstance(w, WindowDescriptor) else np.asarray(w).shape
            break
        if shape:
            break
    win_h, win_w = shape[0], shape[1]

    rng = np.random.default_rng([config.seed, 1])
    neg_keys = []
    seen = set()
    for gi, grid in enumerate(neg_grids):
        for (y, x) in _random_windows(grid, (win_h, win_w), config.neg_init_per_image, rng):
            key = (gi, y, x)
            if key not in seen:
                seen.add(key)
                neg_keys.append(key)
    if not neg_keys:
        raise DataError("negative grids produced no windows")

    def neg_matrix():
        rows = [
            extract_window(neg_grids[gi], (y, x), win_h, win_w).values
            for gi, y, x in neg_keys
        ]
        return np.vstack(rows)

    active = [i for i, cw in enumerate(cluster_windows) if len(cw) >= config.min_pos]
    skipped = [i for i in range(len(cluster_windows)) if i not in active]
    if not active:
        raise DataError("every cluster is below min_pos")

    pos_X = {i: _stack_windows(cluster_windows[i])[0] for i in active}
    templates = {}
    rounds_run = 0
    for rnd in range(config.mining_rounds + 1):
        X_neg = neg_matrix()
        for i in active:
            res = solve_hinge(
                np.vstack([pos_X[i], X_neg]),
                np.concatenate([np.ones(len(pos_X[i])), -np.ones(len(X_neg))]),
                config.C, tol=config.convergence_tol, max_iter=config.max_iter,
            )
            templates[i] = (res["w"], res["bias"], res)
        if rnd == config.mining_rounds:
            break
        grew = False
        for gi, grid in enumerate(neg_grids):
            per_image = 0
            for i in active:
                w, b, _ = templates[i]
                tpl = Template(weights=w.reshape(win_h, win_w, -1), bias=b)
                resp = template_response(tpl, grid)
                for (y, x) in _harvest(resp, config.mining_threshold,
                                        config.neg_per_image_cap):
                    if per_image >= config.neg_per_image_cap:
                        break
                    key = (gi, y, x)
                    if key not in seen:
                        seen.add(key)
                        neg_keys.append(key)
                        per_image += 1
                        grew = True
        rounds_run = rnd + 1
        if not grew:
            break

    X_neg = neg_matrix()
    out = []
    for i in active:
        w, b, res = templates[i]
        tpl = Template(
            weights=w.reshape(win_h, win_w, -1),
            bias=b,
            mixture_id=i,
            meta={"objective": res["objective"], "converged": res["converged"],
                  "C": config.C, "n_pos": len(pos_X[i])},
        )
        scores = np.concatenate([pos_X[i] @ w + b, X_neg @ w + b])
        labels = np.concatenate([np.ones(len(pos_X[i])), np.zeros(len(X_neg))])
        tpl.platt = platt_calibrate(scores, labels)
        out.append(tpl)
    meta = {
        "skipped": skipped,
        "n_negatives": len(neg_keys),
        "neg_keys": [list(k) for k in neg_keys],
        "mining_rounds_run": rounds_run,
        "seed": config.seed,
    }
    return MixtureModel(templates=out, meta=meta)


@dataclass
class Exemplar:
    """A positive training instance with annotated part placements."""

    grid: FeatureGrid
    placements: np.ndarray  # (P, 2) absolute cell coords, row 0 = root

    def __post_init__(self):
        self.placements = np.asarray(self.placements, dtype=np.int64)
        if self.placements.ndim != 2 or self.placements.shape[1] != 2:
            raise InvalidAnnotationError(
                f"placements must be (P, 2), got {self.placements.shape}"
            )


def _psi_pairs(placements, anchors):
    """Deformation features (-dy^2, -dx^2) per non-root part."""
    rel = placements[1:] - placements[0]
    d = rel - anchors
    out = np.empty(2 * d.shape[0], dtype=np.float64)
    out[0::2] = -(d[:, 0].astype(np.float64) ** 2)
    out[1::2] = -(d[:, 1].astype(np.float64) ** 2)
    return out


def _star_feature(grid, placements, root_shape, part_shapes, anchors):
    """Joint appearance + deformation feature vector of one placement."""
    parts = [extract_window(grid, tuple(placements[0]), *root_shape).values]
    for j, (h, w) in enumerate(part_shapes):
        parts.append(extract_window(grid, tuple(placements[j + 1]), h, w).values)
    if part_shapes:
        parts.append(_psi_pairs(placements, anchors))
    return np.concatenate(parts)


def train_star_model(exemplars, neg_grids, config: TrainConfig,
                     root_shape, part_shapes=()) -> StarModel:
    """Jointly trained star model with supervised positive placements.

    Anchors are the rounded mean annotated offsets. Appearance filters and
    spring stiffnesses come from one convex hinge fit per mining round
    (negatives scored and re-placed by the current model). Springs are
    projected to BETA_MIN when the optimizer drives them nonpositive;
    spring coordinates that no training feature constrains fall back to
    config.beta_init.
    """
    if not exemplars:
        raise DataError("no exemplars")
    part_shapes = [tuple(s) for s in part_shapes]
    n_parts = 1 + len(part_shapes)
    rh, rw = root_shape
    depth = exemplars[0].grid.depth

    for ex in exemplars:
        if ex.placements.shape[0] != n_parts:
            raise InvalidAnnotationError(
                f"exemplar annotates {ex.placements.shape[0]} parts, expected {n_parts}"
            )
        z1 = ex.placements[0]
        for j, (h, w) in enumerate(part_shapes):
            rel = ex.placements[j + 1] - z1
            if (rel < 0).any() or rel[0] + h > rh or rel[1] + w > rw:
                raise InvalidAnnotationError(
                    f"part {j + 1} at offset {rel.tolist()} leaves the root window"
                )

    if part_shapes:
        offsets = np.stack([ex.placements[1:] - ex.placements[0] for ex in exemplars])
        anchors = np.rint(offsets.mean(axis=0)).astype(np.int64)
    else:
        anchors = np.zeros((0, 2), dtype=np.int64)

    X_pos = np.vstack([
        _star_feature(ex.grid, ex.placements, root_shape, part_shapes, anchors)
        for ex in exemplars
    ])

    rng = np.random.default_rng([config.seed, 2])
    neg_keys = []
    seen = set()
    for gi, grid in enumerate(neg_grids):
        for (y, x) in _random_windows(grid, root_shape, config.neg_init_per_image, rng):
            key = (gi, y, x)
            if key not in seen:
                seen.add(key)
                neg_keys.append(key)
    if not neg_keys:
        raise DataError("negative grids produced no root windows")
    # initial negatives: parts sit at their anchors (zero deformation)
    neg_placements = {
        key: np.vstack([[key[1], key[2]],
                        np.asarray([key[1], key[2]]) + anchors]).astype(np.int64)
        if part_shapes else np.asarray([[key[1], key[2]]], dtype=np.int64)
        for key in neg_keys
    }

    model = None
    round_objectives = []
    beta_clamped = False
    for rnd in range(config.mining_rounds + 1):
        X_neg = np.vstack([
            _star_feature(neg_grids[gi], neg_placements[(gi, y, x)],
                          root_shape, part_shapes, anchors)
            for gi, y, x in neg_keys
        ])
        X = np.vstack([X_pos, X_neg])
        y = np.concatenate([np.ones(len(X_pos)), -np.ones(len(X_neg))])
        res = solve_hinge(X, y, config.C, tol=config.convergence_tol,
                          max_iter=config.max_iter)
        round_objectives.append(res["objective"])

        theta = res["w"]
        parts = []
        off = 0
        for pi, dims in enumerate([(rh, rw)] + part_shapes):
            size = dims[0] * dims[1] * depth
            parts.append(PartFilter(pi, theta[off:off + size].reshape(dims[0], dims[1], depth)))
            off += size
        if part_shapes:
            raw_beta = theta[off:].reshape(len(part_shapes), 2).copy()
            unconstrained = np.all(X[:, off:] == 0.0, axis=0).reshape(-1, 2)
            springs = np.where(unconstrained, config.beta_init, raw_beta)
            if np.any(springs < BETA_MIN):
                beta_clamped = True
                springs = np.maximum(springs, BETA_MIN)
        else:
            springs = None
        model = StarModel(
            parts=parts, springs=springs, anchors=anchors if part_shapes else None,
            variant="dpm", bias=res["bias"],
        )

        if rnd == config.mining_rounds:
            break
        grew = False
        for gi, grid in enumerate(neg_grids):
            scores, placements = score_dpm(model, grid)
            finite = np.where(np.isfinite(scores), scores, -np.inf)
            per_image = 0
            for (y2, x2) in _harvest(finite, config.mining_threshold,
                                     config.neg_per_image_cap):
                if per_image >= config.neg_per_image_cap:
                    break
                key = (gi, y2, x2)
                if key not in seen:
                    seen.add(key)
                    neg_keys.append(key)
                    neg_placements[key] = placements[y2, x2].copy()
                    per_image += 1
                    grew = True
        if not grew:
            break

    # calibrate on the deployed scoring function (clamped springs), not the
    # raw solver weights: positives at their supervised root cells, mined
    # negatives at their harvested cells
    pos_scores = []
    for ex in exemplars:
        acc, _ = score_dpm(model, ex.grid)
        y0, x0 = ex.placements[0]
        pos_scores.append(acc[y0, x0])
    acc_cache = {}
    neg_scores = []
    for gi, y, x in neg_keys:
        if gi not in acc_cache:
            acc_cache[gi] = score_dpm(model, neg_grids[gi])[0]
        neg_scores.append(acc_cache[gi][y, x])
    raw_scores = np.concatenate([pos_scores, neg_scores])
    labels = np.concatenate([np.ones(len(pos_scores)), np.zeros(len(neg_scores))])
    model.platt = platt_calibrate(raw_scores, labels)
    model.meta = {
        "round_objectives": round_objectives,
        "beta_clamped": beta_clamped,
        "neg_keys": [list(k) for k in neg_keys],
        "converged": res["converged"],
        "C": config.C,
        "seed": config.seed,
        "n_exemplars": len(exemplars),
    }
    return model


def build_edpm(star: StarModel, exemplar_placements, quant: float = 1.0,
               variant: str = "edpm", springs=None) -> StarModel:
    """Exemplar-set model from a trained star: deduplicated quantized shapes.

    exemplar_placements is a list of (P, 2) absolute placements from the
    training exemplars; their root-relative offsets, quantized at `quant`
    cells, become the anchor sets (first-occurrence order, M <= N).

    `springs` optionally replaces the copied stiffnesses for the edpm
    variant (scalar or per-link (P-1, 2) array). The trained star's springs
    span the whole shape library; the exemplar anchors already carry that
    spread, so the deformation width around each anchor is a free kernel
    bandwidth. The epm variant has no within-anchor deformation and keeps
    the star's springs for its shape constants.
    """
    if variant not in ("edpm", "epm"):
        raise ValidationError(f"build_edpm produces edpm or epm, not {variant!r}")
    if springs is not None and variant != "edpm":
        raise ValidationError("spring override only applies to the edpm variant")
    if not len(exemplar_placements):
        raise DataError("no exemplar placements")
    n_links = star.P - 1
    if n_links == 0:
        sets = np.zeros((1, 0, 2), dtype=np.int64)
    else:
        seen = {}
        order = []
        for pl in exemplar_placements:
            pl = np.asarray(pl, dtype=np.int64).reshape(star.P, 2)
            off = pl[1:] - pl[0]
            if quant > 0:
                q = np.rint(off / quant) * quant
            else:
                q = off
            q = q.astype(np.int64)
            key = tuple(map(tuple, q))
            if key not in seen:
                seen[key] = True
                order.append(q)
        sets = np.stack(order)
    if springs is None or n_links == 0:
        out_springs = star.springs
    else:
        out_springs = np.broadcast_to(
            np.asarray(springs, dtype=np.float64), (n_links, 2)).copy()
    return StarModel(
        parts=star.parts,
        springs=out_springs,
        anchors=star.anchors if variant == "epm" else None,
        anchor_sets=sets,
        variant=variant,
        bias=star.bias,
        platt=star.platt,
        meta={**star.meta, "M": int(sets.shape[0]), "quant": float(quant)},
    )
