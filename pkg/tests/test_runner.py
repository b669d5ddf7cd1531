import json
import shutil

import numpy as np
import pytest

from ticstream.datagen import ConfigError, StreamConfig
from ticstream.runner import (
    ExperimentConfig,
    ReportError,
    emit_report,
    evaluate_run,
    iid_split_experiment,
    reference_config,
    run_experiment,
    run_method_seed,
    _prepare_datasets,
)
from ticstream.schedule import ScheduleConfig


def tiny_config(output_dir, **overrides):
    stream = StreamConfig(
        num_steps=3, per_step_train_size=24, per_step_eval_size=12,
        image_dim=6, text_dim=5, latent_dim=4,
        class_birth_schedule=((1, 3),), drift_angle=0.3, noise_sigma=0.1,
        static_class_count=2, seed=11,
    )
    schedule = ScheduleConfig(kind="warmup_cosine", max_lr=1e-3, total_iters=0, warmup_iters=2)
    base = dict(
        stream=stream, schedule=schedule,
        methods=["sequential", "cumulative_all"], seeds=[0],
        total_iters=18, batch_size=8, hidden_dim=8, embed_dim=4,
        output_dir=str(output_dir),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfig:
    def test_validate_accepts_tiny(self, tmp_path):
        tiny_config(tmp_path).validate()

    def test_reference_config_validates(self):
        reference_config()

    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path, merge_first_k=2, lwf_lambda=0.5)
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back.stream == cfg.stream
        assert back.methods == cfg.methods
        assert back.merge_first_k == 2
        assert back.lwf_lambda == 0.5

    def test_rejects_unknown_method(self, tmp_path):
        cfg = tiny_config(tmp_path, methods=["sequential", "nope"])
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_rejects_bad_merge_k(self, tmp_path):
        cfg = tiny_config(tmp_path, merge_first_k=9)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_dims_follow_stream(self, tmp_path):
        d = tiny_config(tmp_path).dims
        assert (d.image_dim, d.text_dim, d.hidden_dim, d.embed_dim) == (6, 5, 8, 4)


class TestRunMethodSeed:
    def run_once(self, tmp_path, method="sequential", sub="a"):
        cfg = tiny_config(tmp_path / sub)
        datasets = _prepare_datasets(cfg)
        run_dir = tmp_path / sub / method / "seed_0"
        metrics = run_method_seed(cfg, datasets, method, 0, run_dir)
        return cfg, run_dir, metrics

    def test_artifacts_written(self, tmp_path):
        _, run_dir, metrics = self.run_once(tmp_path)
        assert (run_dir / "manifest.json").exists()
        assert (run_dir / "metrics.json").exists()
        for t in (1, 2, 3):
            assert (run_dir / f"step_{t:03d}.ticc").exists()
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["method"] == "sequential"
        assert len(manifest["steps"]) == 3
        assert manifest["wall_clock_seconds"] > 0

    def test_metrics_shape(self, tmp_path):
        _, _, metrics = self.run_once(tmp_path)
        assert len(metrics["retrieval"]["entries"]) == 9
        assert metrics["classification"]["T"] == 3
        assert len(metrics["static_per_step"]) == 3
        assert metrics["static_final"] == metrics["static_per_step"][-1]

    def test_deterministic_across_directories(self, tmp_path):
        _, dir_a, ma = self.run_once(tmp_path, sub="a")
        _, dir_b, mb = self.run_once(tmp_path, sub="b")
        assert ma["retrieval"]["entries"] == mb["retrieval"]["entries"]
        for t in (1, 2, 3):
            assert (dir_a / f"step_{t:03d}.ticc").read_bytes() == (
                dir_b / f"step_{t:03d}.ticc"
            ).read_bytes()

    def test_resume_from_step_boundary_is_bit_identical(self, tmp_path):
        cfg, full_dir, _ = self.run_once(tmp_path, sub="full")
        # simulate a run killed after step 1: keep only step-1 artifacts
        part_dir = tmp_path / "part" / "sequential" / "seed_0"
        part_dir.mkdir(parents=True)
        shutil.copy(full_dir / "step_001.ticc", part_dir / "step_001.ticc")
        progress = json.loads((full_dir / "progress.json").read_text())
        ledger = progress["ledger"]
        for key in ("train_macs", "eval_macs", "train_iters"):
            ledger[key] = {t: v for t, v in ledger[key].items() if t == "1"}
        trimmed = {
            "done_through": 1,
            "records": progress["records"][:1],
            "ledger": ledger,
        }
        (part_dir / "progress.json").write_text(json.dumps(trimmed))
        datasets = _prepare_datasets(cfg)
        run_method_seed(cfg, datasets, "sequential", 0, part_dir)
        for t in (2, 3):
            assert (part_dir / f"step_{t:03d}.ticc").read_bytes() == (
                full_dir / f"step_{t:03d}.ticc"
            ).read_bytes()

    def test_completed_run_is_not_retrained(self, tmp_path):
        cfg, run_dir, _ = self.run_once(tmp_path)
        before = (run_dir / "step_003.ticc").read_bytes()
        datasets = _prepare_datasets(cfg)
        run_method_seed(cfg, datasets, "sequential", 0, run_dir)
        assert (run_dir / "step_003.ticc").read_bytes() == before


class TestRunExperiment:
    def test_all_pairs_run(self, tmp_path):
        cfg = tiny_config(tmp_path, seeds=[0, 1])
        manifests = run_experiment(cfg)
        assert len(manifests) == 4
        for mp in manifests:
            assert mp.exists()
        assert (tmp_path / "data" / "stream_manifest.json").exists()

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        cfg_s = tiny_config(tmp_path / "serial")
        serial = run_experiment(cfg_s)
        monkeypatch.setenv("TIC_THREADS", "2")
        cfg_p = tiny_config(tmp_path / "par")
        parallel = run_experiment(cfg_p)
        for sp, pp in zip(serial, parallel):
            ms = json.loads((sp.parent / "metrics.json").read_text())
            mp = json.loads((pp.parent / "metrics.json").read_text())
            assert ms["retrieval"]["entries"] == mp["retrieval"]["entries"]

    def test_merge_first_k(self, tmp_path):
        cfg = tiny_config(tmp_path, merge_first_k=2)
        manifests = run_experiment(cfg)
        manifest = json.loads(manifests[0].read_text())
        assert [r["step"] for r in manifest["steps"]] == [2, 3]
        assert manifest["steps"][0]["train_set_size"] == 48


class TestEvaluateRun:
    def test_rebuilds_identical_metrics(self, tmp_path):
        cfg = tiny_config(tmp_path)
        manifests = run_experiment(cfg)
        run_dir = manifests[0].parent
        before = json.loads((run_dir / "metrics.json").read_text())
        after = evaluate_run(run_dir, tmp_path / "data")
        assert after["retrieval"]["entries"] == before["retrieval"]["entries"]
        assert after["classification"]["entries"] == before["classification"]["entries"]


class TestIidSplit:
    def make_cfg(self, tmp_path, **kw):
        stream = StreamConfig(
            num_steps=1, per_step_train_size=64, per_step_eval_size=16,
            image_dim=6, text_dim=5, latent_dim=4,
            class_birth_schedule=(), drift_angle=0.0, noise_sigma=0.1,
            static_class_count=4, seed=23,
        )
        return tiny_config(tmp_path, stream=stream, total_iters=16, **kw)

    def test_returns_requested_splits(self, tmp_path):
        table = iid_split_experiment(self.make_cfg(tmp_path), splits=(1, 2))
        assert set(table) == {1, 2}
        for v in table.values():
            assert 0.0 <= v <= 1.0

    def test_rejects_drifting_stream(self, tmp_path):
        with pytest.raises(ConfigError):
            iid_split_experiment(tiny_config(tmp_path))

    def test_rejects_bad_split(self, tmp_path):
        with pytest.raises(ConfigError):
            iid_split_experiment(self.make_cfg(tmp_path), splits=(3,))


class TestReports:
    def test_csv_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        manifests = run_experiment(cfg)
        out = emit_report(manifests, tmp_path / "report.csv")
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "method,seed,task,metric,value"
        metrics = json.loads((manifests[0].parent / "metrics.json").read_text())
        # per run: 3 retrieval + 3 classification + 2 compute + optional static
        per_run = 8 + (1 if metrics["static_final"] is not None else 0)
        assert len(lines) == 1 + 2 * per_run

    def test_json_report(self, tmp_path):
        cfg = tiny_config(tmp_path)
        manifests = run_experiment(cfg)
        out = emit_report(manifests, tmp_path / "report.json", fmt="json")
        rows = json.loads(out.read_text())
        assert {r["method"] for r in rows} == {"sequential", "cumulative_all"}
        assert all(set(r) == {"method", "seed", "task", "metric", "value"} for r in rows)

    def test_unreadable_manifest(self, tmp_path):
        bad = tmp_path / "manifest.json"
        bad.write_text("{not json")
        with pytest.raises(ReportError):
            emit_report([bad], tmp_path / "r.csv")

    def test_unknown_format(self, tmp_path):
        cfg = tiny_config(tmp_path)
        manifests = run_experiment(cfg)
        with pytest.raises(ConfigError):
            emit_report(manifests, tmp_path / "r.xml", fmt="xml")
