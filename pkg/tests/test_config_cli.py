import json

import pytest

from argan.cli import main
from argan.config import ConfigValidationError, dump_config, validate_config


class TestValidateConfig:
    def test_empty_config_fully_defaulted(self):
        cfg, cfg_hash, origins = validate_config(None)
        assert cfg["attacks"]["epsilon"] == 0.1
        assert cfg["gan"]["gradient_penalty_weight"] == 10.0
        assert cfg["reconstruction"]["gradient_steps"] == 2250
        assert cfg["reconstruction"]["random_restarts"] == 20
        assert cfg["defenses"]["gaussian_sigma"] == 1.0
        assert cfg["defenses"]["jpeg_quality"] == 50
        assert cfg["defenses"]["feature_squeeze_bit_depth"] == 4
        assert cfg["defenses"]["median_window"] == 3
        assert cfg["epsilon_grid"] == [0.05, 0.10, 0.15, 0.20]
        assert all(origin == "default" for origin in origins.values())

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"attacks": {"epsilom": 0.1}}))
        with pytest.raises(ConfigValidationError, match="epsilom"):
            validate_config(path)

    def test_type_mismatch_named(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gan": {"epochs": "ten"}}))
        with pytest.raises(ConfigValidationError, match="gan.epochs"):
            validate_config(path)

    def test_hash_stable_under_key_reordering(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        a.write_text('{"seed": 3, "gan": {"epochs": 7, "batch_size": 32}}')
        b.write_text('{"gan": {"batch_size": 32, "epochs": 7}, "seed": 3}')
        _, hash_a, _ = validate_config(a)
        _, hash_b, _ = validate_config(b)
        assert hash_a == hash_b

    def test_empty_equals_explicit_defaults_hash(self):
        cfg, hash_empty, _ = validate_config(None)
        _, hash_explicit, _ = validate_config(cfg)
        assert hash_empty == hash_explicit

    def test_missing_lisa_paths_rejected(self):
        with pytest.raises(ConfigValidationError, match="source_dir"):
            validate_config({"dataset": {"kind": "lisa"}})

    def test_nonexistent_lisa_path_rejected(self, tmp_path):
        with pytest.raises(ConfigValidationError, match="does not exist"):
            validate_config({"dataset": {"kind": "lisa",
                                         "source_dir": str(tmp_path / "missing"),
                                         "manifest": str(tmp_path / "m.csv")}})

    def test_profile_beneath_explicit_values(self):
        cfg, _, origins = validate_config({"reconstruction": {"gradient_steps": 77}},
                                          profile="desk")
        assert cfg["reconstruction"]["gradient_steps"] == 77
        assert origins["reconstruction.gradient_steps"] == "explicit"
        assert cfg["reconstruction"]["random_restarts"] == 4
        assert origins["reconstruction.random_restarts"] == "profile:desk"
        assert origins["gan.gradient_penalty_weight"] == "default"

    def test_bad_epsilon_grid(self):
        with pytest.raises(ConfigValidationError, match="epsilon_grid"):
            validate_config({"epsilon_grid": [0.2, 0.1]})

    def test_dump_contains_origins(self):
        cfg, _, origins = validate_config(None)
        dump = json.loads(dump_config(cfg, origins))
        assert dump["origins"]["attacks.epsilon"] == "default"
        assert dump["config"]["attacks"]["epsilon"] == 0.1


class TestCli:
    def test_validation_error_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"epsilom": 1}')
        code = main(["evaluate", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "epsilom" in err

    def test_show_config(self, capsys):
        code = main(["reproduce-desk", "--show-config"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["config"]["reconstruction"]["gradient_steps"] == 200
        assert payload["origins"]["reconstruction.gradient_steps"] == "profile:desk"

    def test_report_without_evaluate_fails_with_exit_3(self, tmp_path, capsys):
        out = tmp_path / "o"
        code = main(["report", "--out", str(out), "--profile", "desk"])
        assert code == 3
        err = capsys.readouterr().err
        assert "missing evaluation artifact" in err
        record = [json.loads(line)
                  for line in (out / "run_log.jsonl").read_text().splitlines()][-1]
        assert record["status"] == "error"

    def test_ingest_and_noop_rerun(self, tmp_path, capsys):
        out = tmp_path / "o"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset": {"kind": "synthetic", "n_per_class": 10},
                                   "output_dir": str(out)}))
        assert main(["ingest", "--config", str(cfg)]) == 0
        assert (out / "data" / "manifest.csv").is_file()
        capsys.readouterr()
        assert main(["ingest", "--config", str(cfg)]) == 0
        assert "up to date" in capsys.readouterr().out

    def test_mismatched_workspace_hash_rejected(self, tmp_path, capsys):
        out = tmp_path / "o"
        cfg1 = tmp_path / "c1.json"
        cfg1.write_text(json.dumps({"dataset": {"kind": "synthetic", "n_per_class": 10},
                                    "output_dir": str(out)}))
        assert main(["ingest", "--config", str(cfg1)]) == 0
        cfg2 = tmp_path / "c2.json"
        cfg2.write_text(json.dumps({"dataset": {"kind": "synthetic", "n_per_class": 12},
                                    "output_dir": str(out)}))
        code = main(["ingest", "--config", str(cfg2)])
        assert code == 2

    def test_meta_json_written(self, tmp_path):
        out = tmp_path / "o"
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"dataset": {"kind": "synthetic", "n_per_class": 10},
                                   "output_dir": str(out)}))
        main(["ingest", "--config", str(cfg)])
        meta = json.loads((out / "meta.json").read_text())
        assert "config_hash" in meta and "jpeg_codec" in meta
