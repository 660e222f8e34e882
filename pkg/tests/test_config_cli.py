import filecmp
import json
import os

import numpy as np
import pytest

from dyntraj import cli
from dyntraj.config import ConfigError, PipelineConfig, dump_config, parse_config

TINY = """
seed = 0
k_points = 4
width_mult = 0.0625
resolution = 64
dpm_steps = 3
batch_size = 2
lr = 1e-3
epochs = 3
hidden = 8
synth_frames = 40
synth_width = 64
synth_height = 64
synth_radius = 3
bandwidth = 6
"""

TEXT_OUTPUTS = [cli.GT_FILE, cli.INSTANCES_FILE, cli.TRACKS_PX_FILE, cli.TRACKS_FILE, cli.PREDICTIONS_FILE,
                cli.REPORT_FILE, cli.DPM_LOSSES, cli.PREDICTOR_LOSSES]


def write_cfg(tmp_path, extra=""):
    p = tmp_path / "run.cfg"
    p.write_text(TINY + f"workdir = {tmp_path / 'work'}\n" + extra)
    return str(p)


class TestConfig:
    def test_defaults(self):
        c = PipelineConfig()
        assert (c.k_points, c.sigma, c.beta, c.lambda_rgb, c.lr) == (180, 0.1, 0.5, 0.2, 1e-4)
        assert (c.t_obs, c.t_pred, c.min_track_len, c.ins_threshold, c.gen_threshold) == (8, 12, 20, 1.5, 1.5)

    def test_unknown_key_listed(self):
        with pytest.raises(ConfigError, match="sigm"):
            parse_config("seed = 1\nsigm = 0.1\n")

    def test_lambda_alias_and_types(self):
        c = parse_config("seed = 3\nlambda = 0.4\nuse_flow = false\nk_points = 12\n")
        assert (c.seed, c.lambda_rgb, c.use_flow, c.k_points) == (3, 0.4, False, 12)

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="k_points"):
            parse_config("k_points = many\n")

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            PipelineConfig().validate()

    def test_dump_round_trip(self):
        c = parse_config("seed = 5\nlambda = 0.3\ntau_h = 0.7\n")
        assert parse_config(dump_config(c)) == c


class TestCli:
    def test_unknown_key_exit_code(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "sigm = 0.1\n")
        assert cli.main(["synth", "--config", cfg]) == cli.EXIT_CONFIG
        assert "sigm" in capsys.readouterr().err

    def test_missing_seed(self, tmp_path, capsys):
        p = tmp_path / "c.cfg"
        p.write_text(f"workdir = {tmp_path}\n")
        assert cli.main(["synth", "--config", str(p)]) == cli.EXIT_CONFIG

    def test_evaluate_without_tracks_names_match(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert cli.main(["synth", "--config", cfg]) == 0
        assert cli.main(["evaluate", "--config", cfg]) == cli.EXIT_MISSING
        err = capsys.readouterr().err
        assert "match" in err and cli.TRACKS_FILE in err

    def test_train_without_frames_names_synth(self, tmp_path, capsys):
        assert cli.main(["train-dpm", "--config", write_cfg(tmp_path)]) == cli.EXIT_MISSING
        assert "synth" in capsys.readouterr().err

    def test_flags_override_config(self, tmp_path, capsys):
        assert cli.main(["pipeline", "--config", write_cfg(tmp_path), "--no-consistency", "--seed", "9",
                         "--dump-config"]) == 0
        c = parse_config(capsys.readouterr().out)
        assert c.use_consistency is False and c.seed == 9


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(root)
    assert cli.main(["pipeline", "--config", cfg]) == 0
    return root, cfg


class TestPipeline:
    def test_artifacts_produced(self, pipeline_run):
        root, _ = pipeline_run
        work = root / "work"
        for name in (cli.TRACKS_FILE, cli.PREDICTOR_FILE, cli.REPORT_FILE, cli.REPORT_JSON, cli.DPM_FILE,
                     cli.POINTS_FILE, cli.INSTANCES_FILE):
            assert (work / name).exists(), name
        report = json.loads((work / cli.REPORT_JSON).read_text())
        for key in ("Ins-Precision", "Ins-Recall", "Gen-Precision", "Gen-Recall", "ADE", "FDE"):
            assert key in report

    def test_predictions_flagged(self, pipeline_run):
        root, _ = pipeline_run
        lines = (root / "work" / cli.PREDICTIONS_FILE).read_text().splitlines()
        assert lines and all(line.endswith(" pred") for line in lines)

    def test_rerun_is_byte_identical(self, pipeline_run, tmp_path):
        root, _ = pipeline_run
        cfg = write_cfg(tmp_path)
        assert cli.main(["pipeline", "--config", cfg]) == 0
        for name in TEXT_OUTPUTS:
            assert filecmp.cmp(root / "work" / name, tmp_path / "work" / name, shallow=False), name
        a = np.load(root / "work" / cli.POINTS_FILE)["points"]
        b = np.load(tmp_path / "work" / cli.POINTS_FILE)["points"]
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_pipeline_equals_stages(self, pipeline_run, tmp_path):
        root, _ = pipeline_run
        cfg = write_cfg(tmp_path)
        for stage in cli.STAGES:
            assert cli.main([stage, "--config", cfg]) == 0, stage
        for name in TEXT_OUTPUTS:
            assert filecmp.cmp(root / "work" / name, tmp_path / "work" / name, shallow=False), name

    def test_flow_only_pipeline_skips_dpm(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert cli.main(["pipeline", "--config", cfg, "--no-heatmaps"]) == 0
        assert not os.path.exists(tmp_path / "work" / cli.DPM_FILE)
        assert (tmp_path / "work" / cli.REPORT_FILE).exists()
