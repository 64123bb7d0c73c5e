"""Command-line front end tests: config parsing, exit codes, and the
files each subcommand leaves behind."""

import json

import numpy as np
import pytest

import partmix.harness as harness
from partmix.cli import experiment_config_from, main, synth_config_from
from partmix.cluster import load_partitions
from partmix.data_io import save_model
from partmix.detect import load_detections
from partmix.errors import DataError, ValidationError
from partmix.harness import (
    SUMMARY_FAMILY,
    build_bundle,
    choose_C,
    derive_seed,
    load_feature_dataset,
    read_records_csv,
)
from partmix.synthdata import SynthConfig
from partmix.train import train_mixture

SYNTH_DOC = {"n_images": 16, "n_negative_images": 3, "image_size": 64,
             "root_cells": 4, "part_cells": 2, "parts_per_object": 3,
             "n_subcategories": 1, "n_shapes": 6, "noise_level": 0.15}

EXP_DOC = {"K_list": [1, 2], "N_list": [16], "resamples": 1,
           "families": ["mixture"], "test_images": 6, "test_negatives": 2,
           "mining_rounds": 1, "cv_folds": 2, "n_cv_neg_windows": 16,
           "max_iter": 50_000, "synth": SYNTH_DOC}


def write_json(path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


# ------------------------------------------------------- config parsing


class TestConfigParsing:
    def test_nested_synth_and_tuple_fields(self):
        config = experiment_config_from(json.loads(json.dumps(EXP_DOC)))
        assert isinstance(config.synth, SynthConfig)
        assert config.K_list == (1, 2)
        assert config.families == ("mixture",)
        assert config.N_list == (16,)

    def test_seed_flag_replaces_seed_list(self):
        config = experiment_config_from(dict(EXP_DOC), seed=7)
        assert config.seeds == (7,)

    def test_synth_seed_override(self):
        assert synth_config_from(dict(SYNTH_DOC), seed=3).seed == 3

    def test_unknown_experiment_key_rejected(self):
        with pytest.raises(ValidationError, match="experiment"):
            experiment_config_from({**EXP_DOC, "n_epochs": 5})

    def test_unknown_synth_key_rejected(self):
        with pytest.raises(ValidationError, match="synth"):
            experiment_config_from(
                {**EXP_DOC, "synth": {**SYNTH_DOC, "blur": 1.0}})

    def test_non_object_document_rejected(self):
        with pytest.raises(ValidationError):
            experiment_config_from([1, 2, 3])
        with pytest.raises(ValidationError):
            synth_config_from("nope")

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        rc = main(["run", "--config", str(tmp_path / "absent.json"),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_malformed_json_exits_one(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main(["gen-synth", "--config", str(bad),
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


# ------------------------------------------------------------------ run


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_run")
    config_path = write_json(root / "exp.json", EXP_DOC)
    out_dir = root / "out"
    rc = main(["run", "--config", config_path, "--out-dir", str(out_dir)])
    assert rc == 0
    return config_path, out_dir


class TestRun:
    def test_all_outputs_written(self, finished_run):
        _, out_dir = finished_run
        for name in ("ap_vs_n.csv", "ap_vs_k.csv", "loglinear.csv",
                     "longtail.csv", "timing.csv", "manifest.json"):
            assert (out_dir / name).exists(), name

    def test_records_cover_the_grid(self, finished_run):
        _, out_dir = finished_run
        records = read_records_csv(out_dir / "ap_vs_n.csv")
        families = {r.family for r in records}
        assert families == {"mixture", SUMMARY_FAMILY}
        assert {r.K for r in records if r.family == "mixture"} == {1, 2}
        assert all(r.seed == 0 for r in records)
        assert not any(r.error for r in records)

    def test_resume_reuses_done_cells(self, finished_run, monkeypatch,
                                      capsys):
        config_path, out_dir = finished_run
        before = (out_dir / "ap_vs_n.csv").read_bytes()

        def boom(*a, **k):
            raise AssertionError("resume must not retrain")

        monkeypatch.setattr(harness, "train_mixture", boom)
        rc = main(["run", "--config", config_path,
                   "--out-dir", str(out_dir), "--resume"])
        assert rc == 0
        assert "0 failed, 0 missing" in capsys.readouterr().out
        assert (out_dir / "ap_vs_n.csv").read_bytes() == before

    def test_seed_flag_changes_every_record(self, tmp_path):
        config_path = write_json(tmp_path / "exp.json", EXP_DOC)
        out_dir = tmp_path / "out"
        rc = main(["run", "--config", config_path, "--out-dir", str(out_dir),
                   "--seed", "5"])
        assert rc == 0
        records = read_records_csv(out_dir / "ap_vs_n.csv")
        assert records and all(r.seed == 5 for r in records)

    def test_failed_cells_exit_one(self, tmp_path, monkeypatch, capsys):
        def boom(*a, **k):
            raise DataError("solver fell over")

        monkeypatch.setattr(harness, "train_mixture", boom)
        config_path = write_json(tmp_path / "exp.json", EXP_DOC)
        out_dir = tmp_path / "out"
        rc = main(["run", "--config", config_path, "--out-dir", str(out_dir)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "FAILED" in err and "solver fell over" in err
        records = read_records_csv(out_dir / "ap_vs_n.csv")
        assert any(r.error for r in records)

    def test_unknown_key_exits_one(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "exp.json",
                                 {**EXP_DOC, "n_epochs": 5})
        rc = main(["run", "--config", config_path,
                   "--out-dir", str(tmp_path / "out")])
        assert rc == 1
        assert "n_epochs" in capsys.readouterr().err


# ------------------------------------------------------------ gen-synth


class TestGenSynth:
    def test_feature_dataset_roundtrips(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "synth.json", SYNTH_DOC)
        out_dir = tmp_path / "ds"
        rc = main(["gen-synth", "--config", config_path,
                   "--out-dir", str(out_dir)])
        assert rc == 0
        assert "16 positive + 3 negative" in capsys.readouterr().out
        samples, truths, geometry = load_feature_dataset(out_dir)
        assert len(samples) == 19
        assert sum(bool(g.boxes) for g in truths.values()) == 16
        assert geometry["root_cells"] == 4

    def test_pixel_mode_writes_pgm(self, tmp_path):
        config_path = write_json(tmp_path / "synth.json", SYNTH_DOC)
        out_dir = tmp_path / "ds"
        rc = main(["gen-synth", "--config", config_path,
                   "--out-dir", str(out_dir), "--mode", "pixel"])
        assert rc == 0
        index = json.loads((out_dir / "index.json").read_text())
        assert index["mode"] == "pixel"
        assert all((out_dir / e["path"]).suffix == ".pgm"
                   for e in index["images"])

    def test_seed_flag_changes_the_draw(self, tmp_path):
        config_path = write_json(tmp_path / "synth.json", SYNTH_DOC)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-synth", "--config", config_path, "--out-dir",
                     str(a), "--seed", "1"]) == 0
        assert main(["gen-synth", "--config", config_path, "--out-dir",
                     str(b), "--seed", "2"]) == 0
        sa, _, _ = load_feature_dataset(a)
        sb, _, _ = load_feature_dataset(b)
        assert not np.array_equal(sa[0].data.cells, sb[0].data.cells)

    def test_unknown_key_exits_one(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "synth.json",
                                 {**SYNTH_DOC, "blur": 1.0})
        rc = main(["gen-synth", "--config", config_path,
                   "--out-dir", str(tmp_path / "ds")])
        assert rc == 1
        assert "blur" in capsys.readouterr().err


# ---------------------------------------------------- sample-partitions


class TestSamplePartitions:
    def test_writes_loadable_partitions(self, tmp_path, capsys):
        doc = {**EXP_DOC, "resamples": 2, "N_list": [8, 16]}
        config_path = write_json(tmp_path / "exp.json", doc)
        out_dir = tmp_path / "parts"
        rc = main(["sample-partitions", "--config", config_path,
                   "--out-dir", str(out_dir)])
        assert rc == 0
        assert "wrote 2 partition files" in capsys.readouterr().out
        for resample in range(2):
            path = out_dir / f"partitions_seed0_r{resample}.json"
            partitions, sizes, seed = load_partitions(path)
            assert sizes == [16, 8]
            assert seed == derive_seed(0, 11, resample)
            drawn = [sorted(i for c in p.clusters for i in c)
                     for p in partitions]
            assert [len(d) for d in drawn] == sizes
            # nesting: the smaller sample sits inside the bigger one
            assert set(drawn[1]) <= set(drawn[0])

    def test_seed_flag_names_the_file(self, tmp_path):
        config_path = write_json(tmp_path / "exp.json", EXP_DOC)
        out_dir = tmp_path / "parts"
        rc = main(["sample-partitions", "--config", config_path,
                   "--out-dir", str(out_dir), "--seed", "4"])
        assert rc == 0
        assert (out_dir / "partitions_seed4_r0.json").exists()


# ----------------------------------------------------------------- eval


@pytest.fixture(scope="module")
def model_and_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_eval")
    config_path = write_json(root / "synth.json", SYNTH_DOC)
    data_dir = root / "ds"
    assert main(["gen-synth", "--config", config_path,
                 "--out-dir", str(data_dir)]) == 0

    config = experiment_config_from(dict(EXP_DOC))
    bundle = build_bundle(config, 0)
    ids = list(range(len(bundle.samples)))
    best_c, _ = choose_C(bundle, config, ids, 0, 0, len(ids))
    tc = harness._cell_train_config(config, best_c, (0, 17, 0, len(ids), 1, 0))
    model = train_mixture([[bundle.windows[i] for i in ids]],
                          bundle.neg_grids, tc)
    model_path = root / "model.json"
    save_model(model, model_path)
    return str(model_path), str(data_dir)


class TestEval:
    def test_prints_ap_and_writes_artifacts(self, model_and_data, tmp_path,
                                            capsys):
        model_path, data_dir = model_and_data
        out_dir = tmp_path / "evalout"
        rc = main(["eval", "--model", model_path, "--data", data_dir,
                   "--out-dir", str(out_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("AP ")
        metrics = json.loads((out_dir / "metrics.json").read_text())
        assert 0.0 <= metrics["ap"] <= 1.0
        assert metrics["n_positives"] == 16
        assert metrics["n_images"] == 19
        dets = load_detections(out_dir / "detections.jsonl")
        assert len(dets) == metrics["n_detections"]
        assert all(d["image_id"] for d in dets)

    def test_threshold_prunes_detections(self, model_and_data, capsys):
        model_path, data_dir = model_and_data
        assert main(["eval", "--model", model_path, "--data", data_dir,
                     "--threshold", "0.999999"]) == 0
        strict = capsys.readouterr().out
        assert main(["eval", "--model", model_path, "--data", data_dir,
                     "--threshold", "0.0"]) == 0
        loose = capsys.readouterr().out
        n = lambda s: int(s.split("(")[1].split()[0])
        assert n(strict) <= n(loose)

    def test_missing_model_exits_one(self, model_and_data, tmp_path, capsys):
        _, data_dir = model_and_data
        rc = main(["eval", "--model", str(tmp_path / "absent.json"),
                   "--data", data_dir])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_missing_dataset_exits_one(self, model_and_data, tmp_path,
                                       capsys):
        model_path, _ = model_and_data
        rc = main(["eval", "--model", model_path,
                   "--data", str(tmp_path / "nowhere")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------- bench


BENCH_DOC = {"P": 2, "M_list": [1, 4], "grid_size": 12, "depth": 3,
             "n_grids": 2, "repeats": 1}


class TestBench:
    def test_table_and_csv(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "bench.json", BENCH_DOC)
        out_dir = tmp_path / "benchout"
        rc = main(["bench", "--config", config_path,
                   "--out-dir", str(out_dir)])
        assert rc == 0
        out = capsys.readouterr().out
        for label in ("dpm", "edpm-M0001", "edpm-M0004"):
            assert label in out
        with open(out_dir / "timing.csv", newline="") as f:
            import csv
            rows = list(csv.DictReader(f))
        assert [r["label"] for r in rows] == ["dpm", "edpm-M0001",
                                              "edpm-M0004"]
        # shared messages: dt_2d work per image never depends on M
        assert {float(r["dt2d_calls_per_image"]) for r in rows} == {1.0}

    def test_naive_rows_scale_with_m(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "bench.json",
                                 {**BENCH_DOC, "include_naive": True})
        rc = main(["bench", "--config", config_path])
        assert rc == 0
        lines = [l.split() for l in capsys.readouterr().out.splitlines()
                 if l.startswith("edpm-M0004")]
        by_label = {l[0]: float(l[4]) for l in lines}
        assert by_label["edpm-M0004"] == 1.0
        assert by_label["edpm-M0004-naive"] == 4.0

    def test_runs_without_config(self, capsys):
        assert main(["bench", "--seed", "1"]) == 0
        assert "dpm" in capsys.readouterr().out

    def test_unknown_key_exits_one(self, tmp_path, capsys):
        config_path = write_json(tmp_path / "bench.json",
                                 {**BENCH_DOC, "threads": 8})
        rc = main(["bench", "--config", config_path])
        assert rc == 1
        assert "threads" in capsys.readouterr().err
