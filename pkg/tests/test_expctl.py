import json
from pathlib import Path

import pytest

from text2act import cli, pipeline
from text2act.config import ExperimentConfig, from_dict


def tiny_config(out_dir, **extra) -> ExperimentConfig:
    base = {
        "out_dir": str(out_dir),
        "n_train_tasks": 4,
        "n_test_tasks": 1,
        "n_traj": 8,
        "wm_dim": 32,
        "z_dim": 16,
        "wm_decoder_width": 32,
        "wm_layers": 1,
        "wm_heads": 2,
        "wm_steps": 40,
        "wm_batch": 8,
        "text_dim": 32,
        "joint_dim": 16,
        "align_steps": 30,
        "align_batch": 4,
        "dt_dim": 32,
        "dt_layers": 1,
        "dt_steps": 30,
        "dt_batch": 8,
        "dd_dim": 32,
        "dd_layers": 1,
        "dd_heads": 2,
        "dd_horizon": 6,
        "diffusion_steps": 6,
        "dd_steps": 30,
        "dd_batch": 8,
        "eval_episodes": 1,
        "eval_seeds": 1,
    }
    base.update(extra)
    return from_dict(base)


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out_dir)
    pipeline.run_pipeline(cfg)
    return out_dir, cfg


class TestPipeline:
    def test_artifacts_present(self, completed_run):
        out_dir, _ = completed_run
        for name in ("config.json", "world.pt", "align.pt", "policy_dt.pt",
                     "eval_report.json", "results.csv", "run_manifest.json"):
            assert (out_dir / name).exists(), name
        manifest = json.loads((out_dir / "run_manifest.json").read_text())
        assert manifest["stage_seeds"]["world"] == manifest["master_seed"] + 2000
        assert manifest["dataset_hashes"]

    def test_resume_skips_training(self, completed_run):
        out_dir, cfg = completed_run
        before = {name: (out_dir / name).read_bytes() for name in ("world.pt", "align.pt", "policy_dt.pt")}
        pipeline.run_pipeline(cfg)
        for name, blob in before.items():
            assert (out_dir / name).read_bytes() == blob

    def test_stage_isolation_policy_retrain(self, completed_run):
        out_dir, cfg = completed_run
        world_before = (out_dir / "world.pt").read_bytes()
        align_before = (out_dir / "align.pt").read_bytes()
        (out_dir / "policy_dt.pt").unlink()
        pipeline.run_pipeline(cfg)
        assert (out_dir / "policy_dt.pt").exists()
        assert (out_dir / "world.pt").read_bytes() == world_before
        assert (out_dir / "align.pt").read_bytes() == align_before

    def test_determinism_across_fresh_runs(self, completed_run, tmp_path_factory):
        out_dir, cfg = completed_run
        other = tmp_path_factory.mktemp("run2")
        cfg2 = from_dict({**cfg.to_dict(), "out_dir": str(other)})
        pipeline.run_pipeline(cfg2)
        a = json.loads((out_dir / "eval_report.json").read_text())
        b = json.loads((other / "eval_report.json").read_text())
        assert a["aggregate_mean"] == b["aggregate_mean"]
        assert a["records"] == b["records"]

    def test_expert_tier_pretrains_on_mixed(self, tmp_path_factory):
        out_dir = tmp_path_factory.mktemp("expert_run")
        cfg = tiny_config(out_dir, tier="expert", wm_steps=10, align_steps=10, dt_steps=10)
        pipeline.run_pipeline(cfg)
        manifest = json.loads((out_dir / "run_manifest.json").read_text())
        assert manifest["pretrain_tier"] == "mixed"


class TestCLI:
    def test_tasks_command(self, tmp_path, capsys):
        rc = cli.main(["tasks", "--out-dir", str(tmp_path), "--n-train-tasks", "3", "--n-test-tasks", "1"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("point-robot") >= 4

    def test_unknown_config_key_exit_code(self, tmp_path, capsys):
        rc = cli.main(["tasks", "--set", "nonsense=1", "--out-dir", str(tmp_path)])
        assert rc == 2
        assert "nonsense" in capsys.readouterr().err

    def test_eval_without_checkpoint_fails(self, tmp_path, capsys):
        rc = cli.main(["eval", "--out-dir", str(tmp_path)])
        assert rc == 1

    def test_pipeline_and_plot(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path)
        path = cfg.save(tmp_path / "tiny.json")
        rc = cli.main(["pipeline", "--config", str(path)])
        assert rc == 0
        rc = cli.main(["plot", "--config", str(path)])
        assert rc == 0
        assert (tmp_path / "plots" / "results.csv").exists()
