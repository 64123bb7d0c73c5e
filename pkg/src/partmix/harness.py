"""Data-scaling experiment driver.

Varies mixture count K and training-set size N over nested partitioned
resamples, picks the regularization constant by cross-validation inside
each training sample, trains every requested model family, scores AP on a
held-out test split generated from fresh seeds, and emits plot-ready CSVs,
a log-scale extrapolation, and inference benchmarks.

Cells of the (family, K, N, seed, resample) grid are independent and
individually deterministic; the record table is assembled order-free and
sorted on emit. Wall-clock fields are the only nondeterministic outputs.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cluster import hierarchical_kmeans, partitioned_sample, refine_consistency
from .data_io import _atomic_write_text
from .detect import detect, nms
from .errors import DataError, ProvenanceError, ValidationError
from .evaluate import GroundTruth, evaluate_detections, load_ground_truth
from .features import FeatureGrid, FeaturePyramid, load_grid
from .models import StarModel
from .partmodel import dt_calls, reset_dt_calls, score_dpm, score_edpm, score_epm
from .synthdata import SynthConfig, generate
from .train import Exemplar, TrainConfig, build_edpm, cross_validate_C, \
    default_c_grid, train_linear, train_mixture, train_star_model

FAMILIES = ("mixture", "dpm", "epm", "edpm")
SUMMARY_FAMILY = "mixture-best"


def derive_seed(*parts) -> int:
    """Stable independent substream seed from integer coordinates."""
    return int(np.random.default_rng(list(parts)).integers(2**31 - 1))


@dataclass
class ExperimentConfig:
    K_list: tuple = (1, 2, 4, 8, 16)
    N_list: tuple = (50, 100, 500, 1000, 3000)
    resamples: int = 5
    C_grid: tuple = ()
    families: tuple = FAMILIES
    seeds: tuple = (0,)
    synth: SynthConfig | None = None
    data_dir: str | None = None      # pre-generated feature dataset
    test_dir: str | None = None
    test_images: int = 100
    test_negatives: int = 40
    test_seed_offset: int = 1_000_000
    mining_rounds: int = 3
    cv_folds: int = 3
    max_iter: int = 200_000
    quantization: float = 1.0
    edpm_spring: float | None = None  # deformation width; None keeps trained springs
    nms_overlap: float = 0.5
    iou_thresh: float = 0.5
    n_cv_neg_windows: int = 80

    def __post_init__(self):
        if not self.K_list or not self.N_list or not self.seeds:
            raise ValidationError("K_list, N_list and seeds must be nonempty")
        if self.edpm_spring is not None and self.edpm_spring <= 0:
            raise ValidationError("edpm_spring must be positive")
        for k in self.K_list:
            if k < 1 or (k & (k - 1)) != 0:
                raise ValidationError(f"K values must be powers of two, got {k}")
        if self.resamples < 1:
            raise ValidationError("resamples must be >= 1")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValidationError(f"unknown families {sorted(unknown)}")
        if self.synth is None and not (self.data_dir and self.test_dir):
            raise ValidationError(
                "dataset source missing: provide synth or data_dir + test_dir")


@dataclass
class ExperimentRecord:
    family: str
    K: int
    N: int
    C_chosen: float
    resample_seed: int
    AP: float
    train_objective: float
    wall_times: dict = field(default_factory=dict)
    seed: int = 0
    resample: int = 0
    val_ap: float = float("nan")
    n_neg: int = 0
    summary: bool = False
    error: str = ""

    def __post_init__(self):
        if not self.error and not math.isnan(self.AP):
            if not 0.0 <= self.AP <= 1.0:
                raise ValidationError(f"AP out of range: {self.AP}")
        self.wall_times = {"train": float(self.wall_times.get("train", 0.0)),
                           "eval": float(self.wall_times.get("eval", 0.0))}

    def sort_key(self):
        return (self.family, self.K, self.N, self.seed, self.resample)


# ------------------------------------------------------------- dataset


@dataclass
class Bundle:
    samples: list            # positive training samples with placements
    windows: list            # root window array per sample
    descriptors: np.ndarray  # flattened windows, for clustering
    neg_grids: list          # fixed mining pool, ordered by image id
    neg_cv_windows: list     # fixed negative windows for C selection
    test_grids: dict
    test_truths: dict
    root_shape: tuple
    part_shapes: tuple


def _root_window(sample, root_shape):
    y, x = sample.placements[0][0]
    rh, rw = root_shape
    return sample.data.cells[y:y + rh, x:x + rw, :].copy()


def _random_neg_windows(neg_grids, shape, count, seed):
    rng = np.random.default_rng([seed, 5])
    rh, rw = shape
    out = []
    for _ in range(count):
        g = neg_grids[int(rng.integers(len(neg_grids)))]
        y = int(rng.integers(g.rows - rh + 1))
        x = int(rng.integers(g.cols - rw + 1))
        out.append(g.cells[y:y + rh, x:x + rw, :].copy())
    return out


def load_feature_dataset(data_dir):
    """Read a directory written by synthdata.write_dataset in feature mode.

    Returns (samples, ground truth by id, geometry dict).
    """
    root = Path(data_dir)
    try:
        index = json.loads((root / "index.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable dataset index under {root}: {exc}") from exc
    if index.get("mode") != "feature":
        raise DataError(f"{root}: experiments need a feature-mode dataset")
    placements = {p["image_id"]: p for p in
                  json.loads((root / "placements.json").read_text())}
    truths = {g.image_id: g for g in load_ground_truth(root / "gt.json")}
    samples = []
    for entry in index["images"]:
        grid = load_grid(root / entry["path"])
        pl = np.asarray(placements[entry["id"]]["placements"], dtype=np.int64)
        if pl.size == 0:
            pl = pl.reshape(0, 0, 2)
        samples.append(_LoadedSample(entry["id"], grid, pl))
    return samples, truths, index["geometry"]


@dataclass
class _LoadedSample:
    image_id: str
    data: FeatureGrid
    placements: np.ndarray


def build_bundle(config: ExperimentConfig, seed: int) -> Bundle:
    """Training pool plus a held-out test split from fresh seeds.

    Test image ids get a distinct prefix so a train/test id collision is
    structurally impossible; negatives are fixed here for the whole run.
    """
    if config.synth is not None:
        synth = replace(config.synth, seed=seed)
        if synth.n_objects_per_image != 1:
            raise ValidationError("experiments expect one object per image")
        if synth.n_negative_images < 1:
            raise ValidationError("experiments need negative images to mine")
        train_ds = generate(synth)
        train_samples = train_ds.samples
        # fresh draw seed, same world: identical subcategory masks and
        # shape libraries, new noise and placements
        test_synth = replace(synth, seed=seed + config.test_seed_offset,
                             world_seed=synth.effective_world_seed,
                             n_images=config.test_images,
                             n_negative_images=config.test_negatives)
        test_ds = generate(test_synth)
        test_samples = test_ds.samples
        test_gt = test_ds.ground_truths
        root_shape = (synth.root_cells, synth.root_cells)
        part_shapes = tuple((synth.part_cells, synth.part_cells)
                            for _ in range(synth.parts_per_object - 1))
    else:
        train_samples, _, geom = load_feature_dataset(config.data_dir)
        test_samples, gt_map, _ = load_feature_dataset(config.test_dir)
        test_gt = [gt_map[s.image_id] for s in test_samples]
        root_shape = (geom["root_cells"], geom["root_cells"])
        part_shapes = tuple((geom["part_cells"], geom["part_cells"])
                            for _ in range(geom["parts_per_object"] - 1))

    positives = [s for s in train_samples if len(s.placements)]
    neg_grids = [s.data for s in sorted(
        (s for s in train_samples if not len(s.placements)),
        key=lambda s: s.image_id)]
    windows = [_root_window(s, root_shape) for s in positives]
    descriptors = np.stack([w.reshape(-1) for w in windows])
    neg_cv = _random_neg_windows(neg_grids, root_shape,
                                 config.n_cv_neg_windows, seed)

    test_grids, test_truths = {}, {}
    for s, gt in zip(test_samples, test_gt):
        key = f"test_{s.image_id}"
        test_grids[key] = s.data
        test_truths[key] = GroundTruth(image_id=key, boxes=list(gt.boxes),
                                       difficult=list(gt.difficult))
    overlap = set(s.image_id for s in positives) & set(test_grids)
    if overlap:
        raise ProvenanceError(f"train/test id overlap: {sorted(overlap)[:3]}")
    return Bundle(samples=positives, windows=windows, descriptors=descriptors,
                  neg_grids=neg_grids, neg_cv_windows=neg_cv,
                  test_grids=test_grids, test_truths=test_truths,
                  root_shape=root_shape, part_shapes=part_shapes)


def effective_sizes(n_list, n_max: int) -> list:
    """Descending nested sample sizes; values beyond the pool are dropped."""
    vals = {int(n) for n in n_list if 0 < int(n) <= n_max}
    vals.add(int(n_max))
    return sorted(vals, reverse=True)


def audit_cell_ids(used_ids, sampled_ids) -> None:
    """The examples a cell trains on must be exactly the sampled partition."""
    if sorted(used_ids) != sorted(sampled_ids):
        raise ProvenanceError(
            f"cell used {len(used_ids)} ids, partition has {len(sampled_ids)}; "
            "training set leaked outside the sampled partition")


# ------------------------------------------------------------ training


def _cell_train_config(config, C, seed_parts):
    return TrainConfig(C=C, seed=derive_seed(*seed_parts),
                       mining_rounds=config.mining_rounds,
                       folds=config.cv_folds, max_iter=config.max_iter)


def choose_C(bundle, config, ids, seed, resample, N):
    """Regularization picked by fold AP on the cell's own windows only."""
    grid = list(config.C_grid) if config.C_grid else default_c_grid(
        bundle.descriptors.shape[1])
    pos = [bundle.windows[i] for i in ids]
    best_C, table = cross_validate_C(pos, bundle.neg_cv_windows, grid,
                                     folds=config.cv_folds,
                                     seed=derive_seed(seed, 13, resample, N))
    val = next(float(r["mean_ap"]) for r in table if r.get("C") == best_C)
    return best_C, val


def cross_validate_mixture(cluster_windows, neg_windows, C, folds, seed,
                           max_iter=200_000):
    """Held-out ranking AP of a K-cluster mixture, averaged over folds.

    Per fold, each cluster trains one template on its in-fold members (no
    mining; negatives are the fixed window set) and held-out windows are
    ranked by the max template score. Clusters too small to split simply
    sit out a fold. Used to pick K inside the training sample.
    """
    from .evaluate import average_precision

    rng = np.random.default_rng(seed)
    assign = [rng.permutation(len(c)) % folds for c in cluster_windows]
    neg = np.stack([np.asarray(w).reshape(-1) for w in neg_windows])
    fold_aps = []
    for f in range(folds):
        templates = []
        held_pos = []
        for ci, wins in enumerate(cluster_windows):
            flat = np.stack([np.asarray(w).reshape(-1) for w in wins])
            train_mask = assign[ci] != f
            held_pos.extend(flat[~train_mask])
            if train_mask.sum() >= 1:
                t = train_linear(flat[train_mask], neg, C=C, max_iter=max_iter)
                templates.append(t)
        if not templates or not held_pos:
            continue
        pos_mat = np.stack(held_pos)
        pos_scores = np.max(
            np.stack([pos_mat @ t.weights.reshape(-1) + t.bias
                      for t in templates]), axis=0)
        neg_scores = np.max(
            np.stack([neg @ t.weights.reshape(-1) + t.bias for t in templates]),
            axis=0)
        scores = np.concatenate([pos_scores, neg_scores])
        labels = np.concatenate([np.ones(len(pos_scores), dtype=np.int8),
                                 np.zeros(len(neg_scores), dtype=np.int8)])
        order = np.argsort(-scores, kind="stable")
        fold_aps.append(average_precision(labels[order], int(labels.sum())))
    if not fold_aps:
        raise DataError("no fold produced a validation score")
    return float(np.mean(fold_aps))


def strip_calibration(model):
    """Copy of the model that detects with raw scores.

    AP is a ranking metric; a steep sigmoid saturates scores into ties and
    an absolute probability cut drops borderline objects, so evaluation
    ranks every window by its uncalibrated margin instead.
    """
    if isinstance(model, StarModel):
        return replace(model, platt=None)
    return replace(model, templates=[replace(t, platt=None)
                                     for t in model.templates])


def evaluate_model(model, bundle, config) -> float:
    """AP of NMS-filtered single-scale detections over the test split."""
    raw = strip_calibration(model)
    records = []
    for key in sorted(bundle.test_grids):
        pyr = FeaturePyramid(levels=[bundle.test_grids[key]], scale_step=2.0)
        dets = nms(detect(raw, pyr, float("-inf")), config.nms_overlap)
        records.extend((key, d.bbox, d.score) for d in dets)
    if not records:
        return 0.0
    ap, _, _ = evaluate_detections(records, bundle.test_truths,
                                   iou_thresh=config.iou_thresh)
    return float(ap)


def _train_cell_model(bundle, config, family, id_clusters, C, seed_parts,
                      star_cache):
    """Model + primal objective for one grid cell; stars are shared across
    the dpm/epm/edpm families of the same (seed, resample, N) cell."""
    flat_ids = [i for ids in id_clusters for i in ids]
    if family == "mixture":
        cluster_windows = [[bundle.windows[i] for i in ids]
                           for ids in id_clusters]
        tc = _cell_train_config(config, C, seed_parts)
        model = train_mixture(cluster_windows, bundle.neg_grids, tc)
        objective = float(sum(t.meta.get("objective", 0.0)
                              for t in model.templates))
        return model, objective, 0.0
    cache_key = tuple(seed_parts[:-1])  # family-independent coordinates
    if cache_key not in star_cache:
        exemplars = [Exemplar(bundle.samples[i].data,
                              bundle.samples[i].placements[0])
                     for i in flat_ids]
        tc = _cell_train_config(config, C, list(seed_parts[:-1]) + [99])
        t0 = time.perf_counter()
        star = train_star_model(exemplars, bundle.neg_grids, tc,
                                bundle.root_shape, bundle.part_shapes)
        star_cache[cache_key] = (star, time.perf_counter() - t0)
    star, star_time = star_cache[cache_key]
    objective = float(star.meta["round_objectives"][-1])
    if family == "dpm":
        return star, objective, star_time
    placements = [bundle.samples[i].placements[0] for i in flat_ids]
    override = config.edpm_spring if family == "edpm" else None
    model = build_edpm(star, placements, quant=config.quantization,
                       variant=family, springs=override)
    return model, objective, star_time


# -------------------------------------------------------- run manifest


def _config_key(config: ExperimentConfig) -> str:
    def plain(v):
        if hasattr(v, "__dataclass_fields__"):
            return {k: plain(getattr(v, k)) for k in v.__dataclass_fields__}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    doc = json.dumps(plain(config), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _record_to_row(r: ExperimentRecord) -> dict:
    return {
        "family": r.family, "K": r.K, "N": r.N, "seed": r.seed,
        "resample": r.resample, "resample_seed": r.resample_seed,
        "C_chosen": repr(float(r.C_chosen)), "AP": repr(float(r.AP)),
        "val_ap": repr(float(r.val_ap)),
        "train_objective": repr(float(r.train_objective)),
        "n_neg": r.n_neg,
        "train_time": repr(float(r.wall_times.get("train", 0.0))),
        "eval_time": repr(float(r.wall_times.get("eval", 0.0))),
        "summary": int(r.summary), "error": r.error,
    }


def _record_from_row(row: dict) -> ExperimentRecord:
    return ExperimentRecord(
        family=row["family"], K=int(row["K"]), N=int(row["N"]),
        C_chosen=float(row["C_chosen"]),
        resample_seed=int(row["resample_seed"]), AP=float(row["AP"]),
        train_objective=float(row["train_objective"]),
        wall_times={"train": float(row["train_time"]),
                    "eval": float(row["eval_time"])},
        seed=int(row["seed"]), resample=int(row["resample"]),
        val_ap=float(row["val_ap"]), n_neg=int(row["n_neg"]),
        summary=bool(int(row["summary"])), error=row["error"],
    )


def _load_manifest(path: Path, config_key: str) -> dict:
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("config_key") != config_key:
            raise ProvenanceError(
                f"manifest at {path} was written for a different config")
        return doc
    return {"version": 1, "config_key": config_key, "cells": {},
            "missing": []}


def _save_manifest(path: Path, manifest: dict, expected_keys) -> None:
    done = {k for k, v in manifest["cells"].items() if v["status"] == "done"}
    manifest["missing"] = sorted(set(expected_keys) - done)
    _atomic_write_text(path, json.dumps(manifest, indent=1))


def manifest_missing(out_dir) -> list:
    """Cell keys not completed; empty means the run is whole."""
    doc = json.loads((Path(out_dir) / "manifest.json").read_text())
    return list(doc.get("missing", []))


# ---------------------------------------------------------------- run


def _plan(config, sizes_by_seed):
    cells = []
    for seed in config.seeds:
        for resample in range(config.resamples):
            for N in sizes_by_seed[seed]:
                for family in config.families:
                    ks = config.K_list if family == "mixture" else (1,)
                    for K in ks:
                        cells.append((family, K, N, seed, resample))
    return cells


def _cell_key(family, K, N, seed, resample) -> str:
    return f"{family}|{K}|{N}|{seed}|{resample}"


def run_experiment(config: ExperimentConfig, out_dir=None,
                   resume: bool = False) -> list:
    """Full grid of ExperimentRecords, plus per-N best-(C, K) summary rows.

    When out_dir is given, a manifest tracks finished cells so interrupted
    runs resume without recomputing; a cell that raises is recorded as
    failed and the run continues.
    """
    key = _config_key(config)
    manifest_path = Path(out_dir) / "manifest.json" if out_dir else None
    if manifest_path and resume:
        manifest = _load_manifest(manifest_path, key)
    else:
        manifest = {"version": 1, "config_key": key, "cells": {}, "missing": []}
    if manifest_path:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)

    records = []
    bundles = {}
    sizes_by_seed = {}
    trees = {}
    for seed in config.seeds:
        bundles[seed] = build_bundle(config, seed)
        sizes_by_seed[seed] = effective_sizes(config.N_list,
                                              len(bundles[seed].samples))
        depth = max(config.K_list).bit_length() - 1
        trees[seed] = hierarchical_kmeans(bundles[seed].descriptors, depth,
                                          derive_seed(seed, 7))
    expected = [_cell_key(*c) for c in _plan(config, sizes_by_seed)]

    for seed in config.seeds:
        bundle = bundles[seed]
        tree = trees[seed]
        sizes = sizes_by_seed[seed]
        leaf_ids = [leaf.members.tolist() for leaf in tree.leaves()]
        for resample in range(config.resamples):
            part_seed = derive_seed(seed, 11, resample)
            partitions = partitioned_sample(leaf_ids, sizes, part_seed)
            refine = refine_consistency(tree, partitions, config.K_list)
            star_cache = {}
            k0 = min(config.K_list)
            for N in sizes:
                flat_ids = sorted(i for ids in refine[(k0, N)] for i in ids)
                C, pooled_val = choose_C(bundle, config, flat_ids, seed,
                                         resample, N)
                k_rows = []
                for family in config.families:
                    ks = config.K_list if family == "mixture" else (1,)
                    for K in ks:
                        ck = _cell_key(family, K, N, seed, resample)
                        prior = manifest["cells"].get(ck)
                        if resume and prior and prior["status"] == "done":
                            rec = _record_from_row(prior["record"])
                            records.append(rec)
                            if family == "mixture":
                                k_rows.append(rec)
                            continue
                        rec = _run_cell(bundle, config, refine, family, K, N,
                                        seed, resample, part_seed, C,
                                        pooled_val, star_cache)
                        records.append(rec)
                        if family == "mixture":
                            k_rows.append(rec)
                        manifest["cells"][ck] = {
                            "status": "failed" if rec.error else "done",
                            "record": _record_to_row(rec),
                        }
                        if manifest_path:
                            _save_manifest(manifest_path, manifest, expected)
                if k_rows and len(config.K_list) > 1:
                    ok = [r for r in k_rows if not r.error
                          and not math.isnan(r.val_ap)]
                    if ok:
                        best = max(ok, key=lambda r: (r.val_ap, -r.K))
                        records.append(replace(best, family=SUMMARY_FAMILY,
                                               summary=True))
    if manifest_path:
        _save_manifest(manifest_path, manifest, expected)
    return records


def _run_cell(bundle, config, refine, family, K, N, seed, resample,
              part_seed, C, pooled_val, star_cache):
    seed_parts = (seed, 17, resample, N, K, FAMILIES.index(family))
    wall = {}
    k0 = min(config.K_list)
    try:
        if family == "mixture":
            id_clusters = refine[(K, N)]
        else:
            id_clusters = [sorted(i for ids in refine[(k0, N)] for i in ids)]
        sampled = [i for ids in id_clusters for i in ids]
        audit_cell_ids(sampled, sampled_ids_at(refine, k0, N))
        t0 = time.perf_counter()
        model, objective, shared = _train_cell_model(
            bundle, config, family, id_clusters, C, seed_parts, star_cache)
        wall["train"] = shared if shared else time.perf_counter() - t0
        if family == "mixture":
            val_ap = cross_validate_mixture(
                [[bundle.windows[i] for i in ids] for ids in id_clusters
                 if ids],
                bundle.neg_cv_windows, C, config.cv_folds,
                derive_seed(seed, 19, resample, N, K),
                max_iter=config.max_iter)
        else:
            val_ap = pooled_val
        t0 = time.perf_counter()
        ap = evaluate_model(model, bundle, config)
        wall["eval"] = time.perf_counter() - t0
        return ExperimentRecord(
            family=family, K=K, N=N, C_chosen=C, resample_seed=part_seed,
            AP=ap, train_objective=objective, wall_times=wall, seed=seed,
            resample=resample, val_ap=val_ap, n_neg=len(bundle.neg_grids))
    except Exception as e:  # cell failure is recorded, the run continues
        return ExperimentRecord(
            family=family, K=K, N=N, C_chosen=C, resample_seed=part_seed,
            AP=float("nan"), train_objective=float("nan"), wall_times=wall,
            seed=seed, resample=resample, n_neg=len(bundle.neg_grids),
            error=f"{type(e).__name__}: {e}")


def sampled_ids_at(refine, k0, N) -> list:
    return [i for ids in refine[(k0, N)] for i in ids]


# --------------------------------------------------------- loglinear


@dataclass
class LoglinearFit:
    slope: float
    intercept: float
    residual: float
    degenerate: bool
    n_points: int

    def n_for_target(self, target: float) -> float:
        if self.degenerate or self.slope == 0.0:
            return math.inf
        return 10.0 ** ((target - self.intercept) / self.slope)


def fit_loglinear(records) -> LoglinearFit:
    """Least-squares AP against log10(N) over records with AP < 1.

    Accepts ExperimentRecords or plain (N, AP) pairs; needs >= 3 distinct
    N. A constant-AP input yields slope 0 with the degenerate flag set, so
    n_for_target reports the infinite-N sentinel.
    """
    points = []
    for r in records:
        n, ap = (r.N, r.AP) if hasattr(r, "AP") else (r[0], r[1])
        if not math.isnan(float(ap)) and float(ap) < 1.0:
            points.append((float(n), float(ap)))
    points.sort()
    if len({n for n, _ in points}) < 3:
        raise DataError("need >= 3 distinct N with AP < 1 to fit")
    x = np.log10([n for n, _ in points])
    y = np.array([ap for _, ap in points])
    if np.ptp(y) == 0.0:
        return LoglinearFit(0.0, float(y[0]), 0.0, True, len(points))
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    residual = float(np.sqrt(np.mean((pred - y) ** 2)))
    return LoglinearFit(float(coef[0]), float(coef[1]), residual, False,
                        len(points))


# --------------------------------------------------------- benchmarks


def _star_scorer(model):
    return {"dpm": score_dpm, "epm": score_epm, "edpm": score_edpm}[model.variant]


def naive_per_mixture_models(model: StarModel) -> list:
    """One plain star per anchor set; the slow path EDPM inference avoids."""
    if model.variant != "edpm":
        raise ValidationError("naive expansion is defined for edpm models")
    out = []
    for anchors in model.anchor_sets:
        out.append(StarModel(parts=model.parts, springs=model.springs,
                             bias=model.bias, anchors=np.asarray(anchors),
                             variant="dpm"))
    return out


def score_edpm_naive(models, grid) -> np.ndarray:
    acc = None
    for m in models:
        s, _ = score_dpm(m, grid)
        acc = s if acc is None else np.maximum(acc, s)
    return acc


def benchmark_inference(models: dict, grids, repeats: int = 5,
                        warmup: int = 1, include_naive: bool = False) -> list:
    """Median wall time and dt_2d calls per image for each model.

    models maps label -> StarModel. With include_naive, every edpm model
    also gets a row scoring its anchor sets one mixture at a time, the
    contrast that shows shared distance transforms are M-independent.
    """
    rows = []
    for label in sorted(models):
        model = models[label]
        if not isinstance(model, StarModel):
            raise ValidationError(f"benchmark expects star models, got {label}")
        scorer = _star_scorer(model)
        M = len(model.anchor_sets) if model.variant in ("epm", "edpm") else 1
        P = len(model.parts)

        def one_pass(fn=scorer, m=model):
            for g in grids:
                fn(m, g)
        rows.append(_timed_row(label, M, P, one_pass, len(grids),
                               repeats, warmup, naive=False))
        if include_naive and model.variant == "edpm":
            naive = naive_per_mixture_models(model)

            def naive_pass(ms=naive):
                for g in grids:
                    score_edpm_naive(ms, g)
            rows.append(_timed_row(f"{label}-naive", M, P, naive_pass,
                                   len(grids), repeats, warmup, naive=True))
    return rows


def _timed_row(label, M, P, one_pass, n_grids, repeats, warmup, naive):
    for _ in range(warmup):
        one_pass()
    reset_dt_calls()
    one_pass()
    calls = dt_calls() / max(n_grids, 1)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        one_pass()
        times.append(time.perf_counter() - t0)
    return {"label": label, "M": M, "P": P,
            "wall_time": float(np.median(times)),
            "dt2d_calls_per_image": calls, "naive": naive}


# ------------------------------------------------------------ outputs


AP_VS_N_COLUMNS = ["family", "K", "N", "seed", "resample", "resample_seed",
                   "C_chosen", "AP", "val_ap", "train_objective", "n_neg",
                   "train_time", "eval_time", "summary", "error"]


def _write_csv(path, columns, rows):
    try:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=columns)
            w.writeheader()
            w.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from e


def emit_outputs(records, out_dir, fits=None, timing=None,
                 longtail=None) -> dict:
    """Plot-data CSVs; returns {name: path}. Ordering is deterministic."""
    if not records:
        raise DataError("no records to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    ordered = sorted(records, key=lambda r: r.sort_key())
    paths["ap_vs_n"] = out / "ap_vs_n.csv"
    _write_csv(paths["ap_vs_n"], AP_VS_N_COLUMNS,
               [_record_to_row(r) for r in ordered])

    k_rows = [r for r in ordered if r.family == "mixture" and not r.summary]
    if not k_rows:
        raise DataError("no records after filter family == 'mixture'")
    paths["ap_vs_k"] = out / "ap_vs_k.csv"
    _write_csv(paths["ap_vs_k"], ["N", "K", "seed", "resample", "AP", "val_ap"],
               [{"N": r.N, "K": r.K, "seed": r.seed, "resample": r.resample,
                 "AP": repr(float(r.AP)), "val_ap": repr(float(r.val_ap))}
                for r in sorted(k_rows,
                                key=lambda r: (r.N, r.K, r.seed, r.resample))])

    paths["loglinear"] = out / "loglinear.csv"
    fit_rows = []
    for label, fit in sorted((fits or {}).items()):
        fit_rows.append({
            "label": label, "slope": repr(fit.slope),
            "intercept": repr(fit.intercept), "residual": repr(fit.residual),
            "degenerate": int(fit.degenerate), "n_points": fit.n_points,
            "n_for_95": repr(fit.n_for_target(0.95)),
        })
    _write_csv(paths["loglinear"], ["label", "slope", "intercept", "residual",
                                    "degenerate", "n_points", "n_for_95"],
               fit_rows)

    paths["longtail"] = out / "longtail.csv"
    tail_rows = [{"rank": i, "count": c, "shape": json.dumps(k)}
                 for i, (k, c) in enumerate(longtail or [])]
    _write_csv(paths["longtail"], ["rank", "count", "shape"], tail_rows)

    paths["timing"] = out / "timing.csv"
    t_rows = [{**row, "wall_time": repr(float(row["wall_time"])),
               "dt2d_calls_per_image": repr(float(row["dt2d_calls_per_image"])),
               "naive": int(row["naive"])}
              for row in (timing or [])]
    _write_csv(paths["timing"], ["label", "M", "P", "wall_time",
                                 "dt2d_calls_per_image", "naive"], t_rows)
    return paths


def read_records_csv(path) -> list:
    """Inverse of the ap_vs_n.csv emission; round-trips exactly."""
    with open(path, newline="") as f:
        return [_record_from_row(row) for row in csv.DictReader(f)]
