"""Command line front end.

Subcommands: run (experiment grid), gen-synth (dataset generation), bench
(inference timing), eval (score a saved model on a dataset), and
sample-partitions (write the nested cluster samples a run would use).
Configs are single JSON documents mapping directly onto the config
dataclasses; an experiment document may nest the synthetic-data config
under "synth".
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cluster import hierarchical_kmeans, partitioned_sample, save_partitions
from .data_io import load_model
from .detect import detect, nms, write_detections
from .errors import DataError, PartmixError, ValidationError
from .evaluate import evaluate_detections
from .features import FeatureGrid, FeaturePyramid
from .harness import (
    ExperimentConfig,
    SUMMARY_FAMILY,
    benchmark_inference,
    build_bundle,
    derive_seed,
    effective_sizes,
    emit_outputs,
    fit_loglinear,
    load_feature_dataset,
    manifest_missing,
    run_experiment,
)
from .models import PartFilter, StarModel
from .synthdata import SynthConfig, generate, shape_histogram, write_dataset

_TUPLE_FIELDS = ("K_list", "N_list", "C_grid", "families", "seeds")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}") from e


def _check_keys(doc, cls, what):
    unknown = set(doc) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown {what} config keys: {sorted(unknown)}")


def synth_config_from(doc, seed=None) -> SynthConfig:
    if not isinstance(doc, dict):
        raise ValidationError("synth config must be a JSON object")
    kw = dict(doc)
    _check_keys(kw, SynthConfig, "synth")
    if seed is not None:
        kw["seed"] = int(seed)
    return SynthConfig(**kw)


def experiment_config_from(doc, seed=None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ValidationError("experiment config must be a JSON object")
    kw = dict(doc)
    synth = kw.pop("synth", None)
    if synth is not None:
        kw["synth"] = synth_config_from(synth)
    for field in _TUPLE_FIELDS:
        if field in kw:
            kw[field] = tuple(kw[field])
    _check_keys(kw, ExperimentConfig, "experiment")
    if seed is not None:
        kw["seeds"] = (int(seed),)
    return ExperimentConfig(**kw)


def _training_placements(config: ExperimentConfig):
    """Pooled (P, 2) placements of the first seed's training positives."""
    seed = config.seeds[0]
    if config.synth is not None:
        from dataclasses import replace
        ds = generate(replace(config.synth, seed=seed))
        samples = ds.samples
    else:
        samples, _, _ = load_feature_dataset(config.data_dir)
    return np.stack([s.placements[0] for s in samples if len(s.placements)])


def cmd_run(args) -> int:
    config = experiment_config_from(_load_json(args.config), args.seed)
    records = run_experiment(config, out_dir=args.out_dir, resume=args.resume)

    fits = {}
    curve = [r for r in records if r.family == SUMMARY_FAMILY] or \
        [r for r in records if r.family == "mixture" and not r.error]
    try:
        fits["ap_vs_n"] = fit_loglinear(curve)
    except DataError:
        pass  # fewer than 3 usable sizes is a legitimate small grid
    longtail = shape_histogram(_training_placements(config),
                               q=config.quantization)
    emit_outputs(records, args.out_dir, fits=fits or None, longtail=longtail)

    failed = [r for r in records if r.error]
    missing = manifest_missing(args.out_dir)
    done = len(records) - len(failed)
    print(f"{done} cells completed, {len(failed)} failed, "
          f"{len(missing)} missing; outputs in {args.out_dir}")
    for r in failed[:10]:
        print(f"  FAILED {r.family} K={r.K} N={r.N} seed={r.seed} "
              f"resample={r.resample}: {r.error}", file=sys.stderr)
    return 0 if not failed and not missing else 1


def cmd_gen_synth(args) -> int:
    config = synth_config_from(_load_json(args.config), args.seed)
    dataset = generate(config, mode=args.mode)
    write_dataset(dataset, args.out_dir)
    n_pos = config.n_images
    n_neg = config.n_negative_images
    print(f"wrote {n_pos} positive + {n_neg} negative {args.mode} images "
          f"to {args.out_dir}")
    return 0


def cmd_sample_partitions(args) -> int:
    config = experiment_config_from(_load_json(args.config), args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for seed in config.seeds:
        bundle = build_bundle(config, seed)
        sizes = effective_sizes(config.N_list, len(bundle.samples))
        depth = max(config.K_list).bit_length() - 1
        tree = hierarchical_kmeans(bundle.descriptors, depth,
                                   derive_seed(seed, 7))
        leaf_ids = [leaf.members.tolist() for leaf in tree.leaves()]
        for resample in range(config.resamples):
            part_seed = derive_seed(seed, 11, resample)
            partitions = partitioned_sample(leaf_ids, sizes, part_seed)
            path = out / f"partitions_seed{seed}_r{resample}.json"
            save_partitions(partitions, sizes, part_seed, path)
            written.append(path)
    print(f"wrote {len(written)} partition files to {out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    samples, truths, _ = load_feature_dataset(args.data)
    detections = []
    records = []
    for s in samples:
        pyr = FeaturePyramid(levels=[s.data], scale_step=2.0)
        for d in nms(detect(model, pyr, args.threshold), args.nms_overlap):
            d.image_id = s.image_id
            detections.append(d)
            records.append((s.image_id, d.bbox, d.score))
    ap, _, n_pos = evaluate_detections(records, truths,
                                       iou_thresh=args.iou)
    print(f"AP {ap:.4f} ({len(records)} detections, {n_pos} objects, "
          f"{len(samples)} images)")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_detections(out / "detections.jsonl", detections,
                         model_ref=str(args.model))
        (out / "metrics.json").write_text(json.dumps({
            "ap": ap, "n_detections": len(records), "n_positives": n_pos,
            "n_images": len(samples), "iou_thresh": args.iou,
            "threshold": args.threshold,
        }, indent=1))
    return 0


_BENCH_DEFAULTS = {"P": 3, "M_list": [1, 6, 100], "grid_size": 40,
                   "depth": 5, "n_grids": 3, "repeats": 5,
                   "include_naive": False, "seed": 0}


def _bench_models(doc):
    rng = np.random.default_rng([int(doc["seed"]), 31])
    P, depth = int(doc["P"]), int(doc["depth"])
    parts = [PartFilter(0, rng.normal(size=(4, 4, depth)))]
    for j in range(1, P):
        parts.append(PartFilter(j, rng.normal(size=(2, 2, depth))))
    springs = rng.uniform(0.1, 0.5, size=(P - 1, 2))
    anchors = rng.integers(0, 3, size=(P - 1, 2))
    models = {"dpm": StarModel(parts=parts, springs=springs,
                               anchors=anchors, variant="dpm")}
    for M in doc["M_list"]:
        sets = rng.integers(0, 3, size=(int(M), P - 1, 2))
        models[f"edpm-M{int(M):04d}"] = StarModel(
            parts=parts, springs=springs, anchor_sets=sets, variant="edpm")
    size = int(doc["grid_size"])
    grids = [FeatureGrid(rng.normal(size=(size, size, depth)), cell_size=8)
             for _ in range(int(doc["n_grids"]))]
    return models, grids


def cmd_bench(args) -> int:
    doc = dict(_BENCH_DEFAULTS)
    if args.config:
        overrides = _load_json(args.config)
        unknown = set(overrides) - set(_BENCH_DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown bench config keys: {sorted(unknown)}")
        doc.update(overrides)
    if args.seed is not None:
        doc["seed"] = args.seed
    models, grids = _bench_models(doc)
    rows = benchmark_inference(models, grids, repeats=int(doc["repeats"]),
                               include_naive=bool(doc["include_naive"]))
    print(f"{'label':<16} {'M':>5} {'P':>3} {'wall_time_s':>12} {'dt2d/img':>9}")
    for r in rows:
        print(f"{r['label']:<16} {r['M']:>5} {r['P']:>3} "
              f"{r['wall_time']:>12.6f} {r['dt2d_calls_per_image']:>9.1f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        import csv
        with open(out / "timing.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["label", "M", "P", "wall_time",
                                              "dt2d_calls_per_image", "naive"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "naive": int(r["naive"])})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partmix",
        description="Template-mixture detector experiments on shared parts.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment grid")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", required=True)
    run.add_argument("--seed", type=int, default=None,
                     help="override the config seed list with one seed")
    run.add_argument("--resume", action="store_true",
                     help="skip cells already recorded in the manifest")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-synth", help="write a synthetic dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--mode", choices=("feature", "pixel"),
                     default="feature")
    gen.set_defaults(func=cmd_gen_synth)

    bench = sub.add_parser("bench", help="time shared-message inference")
    bench.add_argument("--config", default=None)
    bench.add_argument("--out-dir", default=None)
    bench.add_argument("--seed", type=int, default=None)
    bench.set_defaults(func=cmd_bench)

    ev = sub.add_parser("eval", help="score a saved model on a dataset")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True,
                    help="feature dataset directory with gt.json")
    ev.add_argument("--out-dir", default=None)
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--iou", type=float, default=0.5)
    ev.add_argument("--nms-overlap", type=float, default=0.5)
    ev.set_defaults(func=cmd_eval)

    parts = sub.add_parser("sample-partitions",
                           help="write the nested partition samples")
    parts.add_argument("--config", required=True)
    parts.add_argument("--out-dir", required=True)
    parts.add_argument("--seed", type=int, default=None)
    parts.set_defaults(func=cmd_sample_partitions)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PartmixError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
