"""Experiment registry plumbing: configs, records, CSVs, determinism."""

import json
import os

import numpy as np
import pytest

from chainplan.experiments import (
    EXPERIMENT_AXES,
    EXPERIMENTS,
    ExperimentConfig,
    ExperimentError,
    default_config,
    read_csv,
    run_experiment,
)

TINY_CORPUS = dict(n_tasks=3, n_actions=15, actions_per_task=8, n_videos=24,
                   video_len_min=5, video_len_max=7, feature_dim=16,
                   nuisance_dim=4, edge_density=0.8, zipf_exponent=1.0,
                   noise_sigma=0.1, block_shift_sigma=1.0, embed_scale=0.5,
                   hint_scale=0.5, context_scale=0.5)
TINY_TRAIN = dict(epochs=3, base_lr=0.02, decay_start=100, decay_period=50,
                  batch_size=16)
TINY_MODEL = dict(d_model=16, n_heads=2, memory_size=4, feedforward_dim=32)


def tiny_config(experiment, out_dir, horizons=None, seeds=(0, 1)):
    cfg = default_config(experiment, str(out_dir), seeds=seeds,
                         corpus_overrides=TINY_CORPUS,
                         train_overrides=TINY_TRAIN)
    cfg.model = dict(TINY_MODEL)
    if horizons:
        cfg.horizons = tuple(horizons)
    return cfg


class TestConfig:
    def test_json_roundtrip_lossless(self, tmp_path):
        cfg = tiny_config("decoupling", tmp_path)
        again = ExperimentConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.hash() == cfg.hash()

    def test_hash_ignores_out_dir(self, tmp_path):
        a = tiny_config("decoupling", tmp_path / "a")
        b = tiny_config("decoupling", tmp_path / "b")
        assert a.hash() == b.hash()

    def test_hash_sensitive_to_science(self, tmp_path):
        a = tiny_config("decoupling", tmp_path)
        b = tiny_config("decoupling", tmp_path)
        b.gamma = 0.0
        assert a.hash() != b.hash()

    def test_unknown_experiment(self, tmp_path):
        with pytest.raises(ExperimentError):
            default_config("mystery", str(tmp_path))

    def test_registry_covers_axes(self):
        assert set(EXPERIMENTS) == set(EXPERIMENT_AXES)


class TestRuns:
    def test_decoupling_produces_paired_rows(self, tmp_path):
        cfg = tiny_config("decoupling", tmp_path, horizons=(4,), seeds=(0, 1))
        run_experiment(cfg)
        rows = read_csv(tmp_path / "results.csv")
        per_seed = [r for r in rows if r["seed"] != "median"]
        assert len(per_seed) == 4  # 2 variants x 2 seeds
        variants = {(r["variant"], r["seed"]) for r in per_seed}
        assert ("no-decouple", "0") in variants
        assert ("decoupled", "1") in variants
        medians = [r for r in rows if r["seed"] == "median"]
        assert len(medians) == 2

    def test_rows_carry_config_hash(self, tmp_path):
        cfg = tiny_config("time-layers", tmp_path, seeds=(0,))
        cfg.variants = ("avgpool", "mlp")
        run_experiment(cfg)
        for row in read_csv(tmp_path / "results.csv"):
            assert row["config_hash"] == cfg.hash()

    def test_subchain_experiment_labels(self, tmp_path):
        cfg = tiny_config("failed-decoupling", tmp_path, seeds=(0,))
        run_experiment(cfg)
        rows = read_csv(tmp_path / "results.csv")
        labels = {(r["variant"], r["restriction"]) for r in rows}
        assert ("standalone", "1-2-3") in labels
        assert ("in-chain", "1-2-3") in labels

    def test_gamma_sweep_values(self, tmp_path):
        cfg = tiny_config("gamma-sweep", tmp_path, seeds=(0,))
        cfg.variants = ("gamma=0", "gamma=1.5")
        run_experiment(cfg)
        rows = read_csv(tmp_path / "results.csv")
        assert {r["variant"] for r in rows} == {"gamma=0", "gamma=1.5"}

    def test_identical_config_identical_csv_bytes(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            cfg = tiny_config("ar-vs-nar", out, seeds=(0,))
            run_experiment(cfg)
        assert (out_a / "results.csv").read_bytes() == \
            (out_b / "results.csv").read_bytes()
        assert (out_a / "profiles.csv").read_bytes() == \
            (out_b / "profiles.csv").read_bytes()

    def test_profiles_have_per_position_rows(self, tmp_path):
        cfg = tiny_config("error-profile", tmp_path, horizons=(4,), seeds=(0,))
        run_experiment(cfg)
        rows = [r for r in read_csv(tmp_path / "profiles.csv")
                if r["seed"] != "median"]
        assert len(rows) == 4
        assert [float(r["rel_pos"]) for r in rows] == pytest.approx(
            [0.0, 1 / 3, 2 / 3, 1.0], abs=1e-9)

    def test_config_json_written(self, tmp_path):
        cfg = tiny_config("error-profile", tmp_path, horizons=(3,), seeds=(0,))
        run_experiment(cfg)
        stored = json.loads((tmp_path / "config.json").read_text())
        assert stored["experiment"] == "error-profile"
        assert ExperimentConfig.from_json(
            (tmp_path / "config.json").read_text()) == cfg

    def test_train_logs_emitted(self, tmp_path):
        cfg = tiny_config("error-profile", tmp_path, horizons=(3,), seeds=(0,))
        run_experiment(cfg)
        logs = os.listdir(tmp_path / "logs")
        assert any(name.endswith(".csv") for name in logs)

    def test_parallel_seeds_match_sequential_bytes(self, tmp_path, monkeypatch):
        outs = {}
        for name, threads in (("seq", "1"), ("par", "2")):
            monkeypatch.setenv("PLANCTL_THREADS", threads)
            cfg = tiny_config("decoupling", tmp_path / name, horizons=(4,),
                              seeds=(0, 1))
            run_experiment(cfg)
            outs[name] = (tmp_path / name / "results.csv").read_bytes()
        assert outs["seq"] == outs["par"]
