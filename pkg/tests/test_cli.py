import json

import pytest

from scoredrive import cli
from scoredrive.config import save_yaml
from conftest import tiny_experiment_config


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """Tiny full pipeline run shared by the CLI tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_experiment_config(str(out))
    cfg_path = out / "config.yaml"
    save_yaml(cfg, cfg_path)
    base = ["--config", str(cfg_path)]
    for command in ("gen-data", "train-prior", "train-critic", "extract-policy"):
        assert cli.main(base + [command]) == 0
    assert cli.main(base + ["eval", "--planner", "policy", "--total", "2"]) == 0
    assert cli.main(base + ["eval", "--planner", "expert", "--total", "2"]) == 0
    assert cli.main(base + ["eval", "--planner", "expert", "--reactive", "--total", "2"]) == 0
    assert cli.main(base + ["bench"]) == 0
    assert cli.main(base + ["report"]) == 0
    return out, cfg_path


class TestPipeline:
    def test_all_artifacts_exist(self, pipeline_dir):
        out, _ = pipeline_dir
        for name in (
            "dataset.bin",
            "prior.ckpt",
            "critic_value.ckpt",
            "critic_q1.ckpt",
            "critic_q2.ckpt",
            "critic_q1_target.ckpt",
            "critic_q2_target.ckpt",
            "policy_init.ckpt",
            "policy.ckpt",
            "training_log.csv",
            "srpo_log.csv",
            "eval_policy.csv",
            "eval_expert.csv",
            "eval_expert_reactive.csv",
            "latency.json",
            "report.json",
            "report.csv",
        ):
            assert (out / name).exists(), name

    def test_report_contents(self, pipeline_dir):
        out, _ = pipeline_dir
        payload = json.loads((out / "report.json").read_text())
        assert "policy" in payload["planners"]
        assert "expert" in payload["planners"]
        assert "expert_reactive" in payload["planners"]
        assert "latency" in payload
        assert "config_hash" in payload

    def test_checkpoints_carry_provenance(self, pipeline_dir):
        from scoredrive import nets

        out, _ = pipeline_dir
        _, _, extra, _ = nets.load_checkpoint(out / "policy.ckpt")
        for key in ("config_hash", "stage_hash", "seed", "normalizer_id",
                    "source_prior_digest", "source_critic_digest", "theta_init_digest"):
            assert key in extra


class TestErrors:
    def test_missing_artifact_is_reported(self, tmp_path, capsys):
        cfg = tiny_experiment_config(str(tmp_path / "empty"))
        path = tmp_path / "cfg.yaml"
        save_yaml(cfg, path)
        code = cli.main(["--config", str(path), "extract-policy"])
        assert code == cli.EXIT_CODES["MISSING_ARTIFACT"]
        err = capsys.readouterr().err
        assert err.startswith("ERROR MISSING_ARTIFACT:")

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        path = tmp_path / "cfg.yaml"
        path.write_text("worlds:\n  dt: 0.5\n")
        code = cli.main(["--config", str(path), "gen-data"])
        assert code == cli.EXIT_CODES["CONFIG_INVALID"]
        assert "ERROR CONFIG_INVALID" in capsys.readouterr().err

    def test_hash_mismatch_detected(self, pipeline_dir, tmp_path, capsys):
        out, cfg_path = pipeline_dir
        cfg = tiny_experiment_config(str(out))
        cfg.world.v_max = 13.0  # changes the dataset-stage hash
        path = tmp_path / "changed.yaml"
        save_yaml(cfg, path)
        code = cli.main(["--config", str(path), "train-prior"])
        assert code == cli.EXIT_CODES["HASH_MISMATCH"]
        assert "ERROR HASH_MISMATCH" in capsys.readouterr().err

    def test_downstream_hyper_change_keeps_upstream_valid(self, pipeline_dir, tmp_path):
        out, _ = pipeline_dir
        cfg = tiny_experiment_config(str(out))
        cfg.srpo.temperature = 0.31
        path = tmp_path / "srpo_changed.yaml"
        save_yaml(cfg, path)
        # extraction re-runs fine on the existing dataset/prior/critic
        assert cli.main(["--config", str(path), "extract-policy"]) == 0

    def test_report_without_eval_fails(self, tmp_path, capsys):
        cfg = tiny_experiment_config(str(tmp_path / "no_eval"))
        path = tmp_path / "cfg.yaml"
        save_yaml(cfg, path)
        code = cli.main(["--config", str(path), "report"])
        assert code == cli.EXIT_CODES["MISSING_ARTIFACT"]
