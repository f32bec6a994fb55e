import json
from pathlib import Path

import numpy as np
import pytest

from conftest import mini_config
from simgrasp.adversarial import read_loss_log
from simgrasp.cli import main as cli_main
from simgrasp.dataset import load_dataset
from simgrasp.metrics import (
    average_precision,
    load_detections,
    load_report,
    match_detections,
    mean_ap_range,
)
from simgrasp.pipeline import (
    MissingStageError,
    PipelineConfig,
    RunDirError,
    cmd_evaluate,
    cmd_gen_scenes,
    cmd_run_grasp,
    cmd_synthesize,
    cmd_train_detector,
    cmd_train_diffusion,
    default_config,
    load_manifest,
    run_all,
)


def file_bytes(root: Path, patterns=("*.png", "*.json", "*.csv", "*.jsonl", "*.ckpt")):
    out = {}
    for pattern in patterns:
        for p in sorted(Path(root).rglob(pattern)):
            if p.name in ("manifest.json",) and "data" not in str(p.relative_to(root)):
                continue  # run manifest carries timestamps
            if p.name == "config.json" or p.name == ".lock":
                continue
            out[str(p.relative_to(root))] = p.read_bytes()
    return out


class TestGenScenes:
    def test_split_sizes_and_styles(self, tmp_path):
        cfg = mini_config()
        cmd_gen_scenes(cfg, tmp_path)
        for split, n in (("train", 12), ("val", 4), ("test", 4)):
            scenes, images, manifest = load_dataset(tmp_path / "data" / split)
            assert len(scenes) == n
            assert all(p["real"] is not None for p in images)
            if split == "train":
                assert all(p["sim"] is not None for p in images)
            else:
                assert all(p["sim"] is None for p in images)

    def test_rerun_identical(self, tmp_path):
        cfg = mini_config()
        cmd_gen_scenes(cfg, tmp_path / "a")
        cmd_gen_scenes(cfg, tmp_path / "b")
        assert file_bytes(tmp_path / "a" / "data") == file_bytes(tmp_path / "b" / "data")

    def test_seed_ranges_disjoint(self, tmp_path):
        cfg = mini_config()
        cmd_gen_scenes(cfg, tmp_path)
        seeds = {}
        for split in ("train", "val", "test"):
            _, _, manifest = load_dataset(tmp_path / "data" / split)
            seeds[split] = {e.seed for e in manifest.entries}
        assert not (seeds["train"] & seeds["val"])
        assert not (seeds["train"] & seeds["test"])
        assert not (seeds["val"] & seeds["test"])

    def test_refuses_nonempty_without_force(self, tmp_path):
        cfg = mini_config()
        cmd_gen_scenes(cfg, tmp_path)
        with pytest.raises(RunDirError):
            cmd_gen_scenes(cfg, tmp_path)
        cmd_gen_scenes(cfg, tmp_path, force=True)  # allowed


class TestTrainDiffusion:
    def test_requires_scenes(self, tmp_path):
        with pytest.raises(MissingStageError):
            cmd_train_diffusion(mini_config(), tmp_path)

    def test_sim_only_skips(self, tmp_path):
        cfg = mini_config(variant="sim_only")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        manifest = load_manifest(tmp_path)
        assert manifest.stages["train_diffusion"].skipped
        assert manifest.stages["train_diffusion"].complete

    def test_no_adv_zero_adv_column(self, tmp_path):
        cfg = mini_config(variant="no_adv")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        rows = read_loss_log(tmp_path / "diffusion" / "losses.csv")
        assert rows and all(r.l_adv_gen == 0.0 for r in rows)
        assert all(r.l_dis != 0.0 for r in rows)

    def test_adversarial_emits_three_columns(self, tmp_path):
        cfg = mini_config(variant="adversarial")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        rows = read_loss_log(tmp_path / "diffusion" / "losses.csv")
        assert rows and any(r.l_adv_gen != 0.0 for r in rows)

    def test_resume_continues_step_numbering(self, tmp_path):
        cfg = mini_config(variant="no_adv")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        first = read_loss_log(tmp_path / "diffusion" / "losses.csv")
        cmd_train_diffusion(cfg, tmp_path, force=True, resume=True)
        second = read_loss_log(tmp_path / "diffusion" / "losses.csv")
        assert len(second) > len(first)
        assert [r.step for r in second] == list(range(len(second)))
        assert [r.l_diff for r in second[:len(first)]] == [r.l_diff for r in first]


class TestSynthesize:
    def test_counts_and_rerun_identical(self, tmp_path):
        cfg = mini_config(variant="no_adv")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        cmd_synthesize(cfg, tmp_path)
        scenes, images, _ = load_dataset(tmp_path / "synth")
        assert len(scenes) == 12
        assert all(p["real"] is not None for p in images)
        before = file_bytes(tmp_path / "synth")
        cmd_synthesize(cfg, tmp_path, force=True)
        assert file_bytes(tmp_path / "synth") == before

    def test_sim_only_bit_equal_to_sim_renders(self, tmp_path):
        cfg = mini_config(variant="sim_only")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_train_diffusion(cfg, tmp_path)
        cmd_synthesize(cfg, tmp_path)
        _, train_images, _ = load_dataset(tmp_path / "data" / "train")
        _, synth_images, _ = load_dataset(tmp_path / "synth")
        for a, b in zip(train_images, synth_images):
            assert np.array_equal(a["sim"], b["sim"])

    def test_requires_diffusion_for_generative_variants(self, tmp_path):
        cfg = mini_config(variant="adversarial")
        cmd_gen_scenes(cfg, tmp_path)
        with pytest.raises(MissingStageError):
            cmd_synthesize(cfg, tmp_path)


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = mini_config(variant="adversarial")
    run_all(cfg, root)
    return cfg, root


class TestDetectorStage:
    def test_artifacts_and_epoch_metrics(self, completed_run):
        cfg, run_dir = completed_run
        det = run_dir / "detector"
        assert (det / "detector.ckpt").exists()
        rows = (det / "epoch_metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + cfg.detector.epochs
        assert rows[0] == "epoch,val_precision,val_recall,val_map50"

    def test_detection_dumps_exist(self, completed_run):
        _, run_dir = completed_run
        assert (run_dir / "detector" / "detections_val.jsonl").exists()
        assert (run_dir / "detector" / "detections_test.jsonl").exists()


class TestGraspStage:
    def test_trial_logs_per_tier(self, completed_run):
        cfg, run_dir = completed_run
        from simgrasp.control import load_trial_summaries
        for tier in ("plain", "complex"):
            summaries = load_trial_summaries(run_dir / "grasp" / f"trials_{tier}.jsonl")
            assert len(summaries) == cfg.grasp.trials_per_tier

    def test_oracle_mode(self, tmp_path):
        cfg = mini_config(variant="sim_only")
        cmd_gen_scenes(cfg, tmp_path)
        cmd_run_grasp(cfg, tmp_path, oracle=True)
        from simgrasp.control import load_trial_summaries
        summaries = load_trial_summaries(tmp_path / "grasp" / "trials_plain.jsonl")
        assert all(s.success for s in summaries)


class TestEvaluate:
    def test_report_values_match_direct_recomputation(self, completed_run):
        cfg, run_dir = completed_run
        report = load_report(run_dir / "report" / "report.json")
        row = report.methods["adversarial"]
        scenes, _, _ = load_dataset(run_dir / "data" / "test")
        preds = load_detections(run_dir / "detector" / "detections_test.jsonl")
        gts = {f"{i:06d}": list(s.objects) for i, s in enumerate(scenes)}
        m = match_detections(preds, gts, 0.5)
        assert row.precision == m.precision()
        assert row.recall == m.recall()
        assert row.map50 == average_precision(preds, gts, 0.5)
        assert row.map50_95 == mean_ap_range(preds, gts)

    def test_single_variant_single_row(self, completed_run):
        _, run_dir = completed_run
        csv_lines = (run_dir / "report" / "report.csv").read_text().strip().splitlines()
        assert len(csv_lines) == 2
        assert csv_lines[1].startswith("adversarial,")

    def test_requires_completed_run(self, tmp_path):
        cfg = mini_config()
        cmd_gen_scenes(cfg, tmp_path)
        with pytest.raises(MissingStageError):
            cmd_evaluate([tmp_path])


class TestCli:
    def test_missing_stage_exit_code_2(self, tmp_path):
        rc = cli_main(["synthesize", "--run-dir", str(tmp_path / "void")])
        assert rc == 2

    def test_validation_error_exit_code_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"schema_version": "0"}))
        rc = cli_main(["gen-scenes", "--config", str(bad), "--run-dir", str(tmp_path / "r")])
        assert rc == 1

    def test_init_config_round_trip(self, tmp_path):
        out = tmp_path / "cfg.json"
        assert cli_main(["init-config", "--scale", "smoke", "--out", str(out)]) == 0
        cfg = PipelineConfig.from_json(json.loads(out.read_text()))
        assert cfg.to_json() == default_config("smoke").to_json()

    def test_gen_scenes_via_cli(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(mini_config().to_json()))
        rc = cli_main(["gen-scenes", "--config", str(cfgp), "--run-dir", str(tmp_path / "r")])
        assert rc == 0
        assert (tmp_path / "r" / "data" / "train" / "manifest.json").exists()


class TestDeterminismAndEquivalence:
    def test_run_equals_stage_sequence(self, tmp_path):
        cfg = mini_config(variant="no_adv", seed=5)
        run_all(cfg, tmp_path / "a")
        b = tmp_path / "b"
        cmd_gen_scenes(cfg, b)
        cmd_train_diffusion(cfg, b)
        cmd_synthesize(cfg, b)
        cmd_train_detector(cfg, b)
        cmd_run_grasp(cfg, b)
        cmd_evaluate([b])
        assert file_bytes(tmp_path / "a") == file_bytes(b)

    def test_full_rerun_bit_identical_reports(self, tmp_path):
        cfg = mini_config(variant="adversarial", seed=9)
        run_all(cfg, tmp_path / "a")
        run_all(cfg, tmp_path / "b")
        for name in ("report.json", "report.csv", "report.md"):
            assert (tmp_path / "a" / "report" / name).read_bytes() == \
                (tmp_path / "b" / "report" / name).read_bytes()
        assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")
