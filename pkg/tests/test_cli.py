import json
import os

import pytest

from compass.cli import main
from compass.config import Config, dump_config, load_config
from compass.errors import ConfigError

SMALL = {"K": 16, "k_nn": 3, "M": 2, "N": 2, "B": 4, "d_pe": 3,
         "d_e": 8, "n_heads": 2, "H": 3, "stride": 1,
         "n_env": 2, "rollout_T": 4, "train_horizon": 4}


@pytest.fixture
def small_cfg_path(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


class TestLoadConfig:
    def test_empty_object_gives_published_defaults(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}")
        cfg = load_config(str(path))
        s = cfg.sim
        assert (s.K, s.M, s.N) == (200, 3, 8)
        assert s.r_sense == 0.1 and s.speed_factor == 0.6 and s.B == 30
        assert s.k_nn == 10

    def test_out_of_range_names_key(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"K": 1}')
        with pytest.raises(ConfigError, match="'K'"):
            load_config(str(path))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"frobnicate": 3}')
        with pytest.raises(ConfigError, match="frobnicate"):
            load_config(str(path))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/config.json")

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(str(path))

    def test_dump_load_round_trip(self, tmp_path):
        cfg = Config.from_dict(SMALL)
        path = tmp_path / "cfg.json"
        dump_config(cfg, str(path))
        again = load_config(str(path))
        assert again.to_dict() == cfg.to_dict()
        assert again.hash() == cfg.hash()


class TestExitCodes:
    def test_missing_config_file_is_2(self, tmp_path):
        rc = main(["eval", "--planner", "random", "--config", "/nope.json",
                   "--runs", "1", "--out", str(tmp_path)])
        assert rc == 2

    def test_unknown_planner_is_2(self, tmp_path, capsys):
        rc = main(["eval", "--planner", "teleport", "--runs", "1",
                   "--out", str(tmp_path)])
        assert rc == 2

    def test_unknown_variant_is_2(self, tmp_path):
        rc = main(["ablate", "--variant", "no_everything", "--out", str(tmp_path)])
        assert rc == 2

    def test_unknown_flag_is_2(self, tmp_path):
        rc = main(["eval", "--planner", "random", "--out", str(tmp_path),
                   "--warp-speed"])
        assert rc == 2

    def test_bad_env_threads_is_2(self, tmp_path, small_cfg_path, monkeypatch):
        monkeypatch.setenv("COMPASS_THREADS", "many")
        rc = main(["eval", "--planner", "random", "--config", small_cfg_path,
                   "--runs", "1", "--out", str(tmp_path / "o")])
        assert rc == 2


class TestEvalCommand:
    def test_single_run_single_row(self, tmp_path, small_cfg_path):
        out = tmp_path / "out"
        rc = main(["eval", "--planner", "random", "--config", small_cfg_path,
                   "--runs", "1", "--seed", "5", "--out", str(out)])
        assert rc == 0
        lines = (out / "results.csv").read_text().strip().splitlines()
        assert lines[0].startswith("# tool=artifact-")
        assert "config_hash=" in lines[0]
        assert len(lines) == 3  # meta, header, one data row

    def test_outputs_byte_identical_across_runs(self, tmp_path, small_cfg_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            rc = main(["eval", "--planner", "coverage", "--config", small_cfg_path,
                       "--seed", "7", "--runs", "3", "--out", str(out)])
            assert rc == 0
        for name in ("results.csv", "aggregate.csv", "trace_coverage.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_dump_episodes(self, tmp_path, small_cfg_path):
        out = tmp_path / "out"
        rc = main(["eval", "--planner", "greedy", "--config", small_cfg_path,
                   "--runs", "2", "--out", str(out), "--dump-episodes"])
        assert rc == 0
        files = sorted(os.listdir(out / "episodes"))
        assert files == ["run_0.jsonl", "run_1.jsonl"]
        rec = json.loads((out / "episodes" / "run_0.jsonl").read_text().splitlines()[0])
        assert rec["step"] == 1

    def test_compass_planner_fresh_policy(self, tmp_path, small_cfg_path):
        out = tmp_path / "out"
        rc = main(["eval", "--planner", "compass", "--config", small_cfg_path,
                   "--runs", "1", "--out", str(out)])
        assert rc == 0
        assert (out / "trace_compass.csv").exists()


class TestTrainAndAblate:
    def test_train_writes_artifacts(self, tmp_path, small_cfg_path):
        out = tmp_path / "run"
        rc = main(["train", "--config", small_cfg_path, "--iters", "2",
                   "--out", str(out), "--seed", "1"])
        assert rc == 0
        assert (out / "train_log.csv").exists()
        assert (out / "checkpoint_final.ckpt").exists()
        assert (out / "config_resolved.json").exists()

    def test_eval_with_trained_checkpoint(self, tmp_path, small_cfg_path):
        run = tmp_path / "run"
        assert main(["train", "--config", small_cfg_path, "--iters", "1",
                     "--out", str(run), "--seed", "1"]) == 0
        out = tmp_path / "eval"
        rc = main(["eval", "--planner", "compass", "--config", small_cfg_path,
                   "--runs", "1", "--out", str(out),
                   "--checkpoint", str(run / "checkpoint_final.ckpt")])
        assert rc == 0

    def test_ablate_produces_metric_triplet(self, tmp_path, small_cfg_path):
        out = tmp_path / "abl"
        rc = main(["ablate", "--variant", "no_presence", "--config", small_cfg_path,
                   "--iters", "1", "--runs", "2", "--out", str(out), "--seed", "2"])
        assert rc == 0
        lines = (out / "ablation.csv").read_text().strip().splitlines()
        assert lines[1] == "variant,uncertainty,rmse,visits"
        cells = lines[2].split(",")
        assert cells[0] == "no_presence"
        assert all(float(c) >= 0 for c in cells[1:])


class TestPlotCommand:
    def _make_traces(self, tmp_path, small_cfg_path, planners):
        out = tmp_path / "traces"
        for planner in planners:
            rc = main(["eval", "--planner", planner, "--config", small_cfg_path,
                       "--runs", "2", "--seed", "3", "--out", str(out)])
            assert rc == 0
        return out

    def test_svg_structure(self, tmp_path, small_cfg_path):
        out = self._make_traces(tmp_path, small_cfg_path,
                                ["random", "coverage", "greedy"])
        fig = tmp_path / "fig.svg"
        rc = main(["plot", "--traces", str(out), "--out", str(fig)])
        assert rc == 0
        svg = fig.read_text()
        assert svg.count("<polyline") == 3
        assert svg.count('fill-opacity="0.18"') == 3  # one std band per planner
        assert svg.startswith("<!-- tool=artifact-")
        for name in ("random", "coverage", "greedy"):
            assert f">{name}</text>" in svg

    def test_empty_trace_dir_is_config_error(self, tmp_path):
        (tmp_path / "none").mkdir()
        rc = main(["plot", "--traces", str(tmp_path / "none"),
                   "--out", str(tmp_path / "fig.svg")])
        assert rc == 2
