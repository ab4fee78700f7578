"""End-to-end command-line workflows driven through main()."""

import json
import os
from pathlib import Path

import numpy as np
import pytest

from moe_forge.anytime import CURVE_HEADER
from moe_forge.cli import WORKERS_ENV, _plan_from_config, main
from moe_forge.data import generate_synthetic, save_csv
from moe_forge.errors import ConfigError
from moe_forge.jsonio import load_json


def make_config(tmp_path: Path, **overrides) -> Path:
    config = {
        "seed": 3,
        "output_dir": str(tmp_path / "run"),
        "data": {
            "synthetic": {
                "num_classes": 3,
                "modes_per_class": 1,
                "dim": 4,
                "mode_stddev": 0.5,
                "samples_per_mode": 30,
                "seed": 5,
            }
        },
        "model": {"layer_dims": [4, 6, 3], "num_experts": 2},
        "train": {
            "expert_epochs": 4,
            "sgd_base": {"epochs": 4},
            "sgd_gate": {"learning_rate": 0.5, "epochs": 8},
            "sgd_expert": {"epochs": 2},
            "sgd_ensembler": {"epochs": 2},
        },
    }
    config.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config, indent=1))
    return path


def eval_data_file(tmp_path: Path) -> Path:
    path = tmp_path / "eval_data.json"
    path.write_text(
        json.dumps(
            {
                "synthetic": {
                    "num_classes": 3,
                    "modes_per_class": 1,
                    "dim": 4,
                    "mode_stddev": 0.5,
                    "samples_per_mode": 10,
                    "seed": 99,
                }
            }
        )
    )
    return path


class TestTrain:
    def test_writes_model_and_manifest(self, tmp_path, capsys):
        config = make_config(tmp_path)
        assert main(["train", str(config)]) == 0
        out = tmp_path / "run"
        assert (out / "model.json").exists()
        manifest = load_json(out / "manifest.json")
        assert manifest["tag"] == "mixture"
        assert manifest["train_samples"] == 90
        assert [s["stage"] for s in manifest["stages"]] == [
            "base", "gate_init", "gate", "experts", "ensemblers",
        ]
        assert not any(s["loaded"] for s in manifest["stages"])
        assert "model.json" in manifest["artifacts"]
        assert "stages/base.json" in manifest["artifacts"]
        assert "manifest.json" not in manifest["artifacts"]
        stdout = capsys.readouterr().out
        assert "train accuracy (top-1 routing):" in stdout

    def test_manifest_artifact_hashes_are_real(self, tmp_path):
        import hashlib

        config = make_config(tmp_path)
        main(["train", str(config)])
        out = tmp_path / "run"
        manifest = load_json(out / "manifest.json")
        for rel, digest in manifest["artifacts"].items():
            assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest

    def test_second_run_resumes_and_reproduces_the_model(self, tmp_path, capsys):
        config = make_config(tmp_path)
        main(["train", str(config)])
        first = (tmp_path / "run" / "model.json").read_bytes()
        capsys.readouterr()
        assert main(["train", str(config)]) == 0
        manifest = load_json(tmp_path / "run" / "manifest.json")
        assert all(s["loaded"] for s in manifest["stages"])
        assert (tmp_path / "run" / "model.json").read_bytes() == first
        assert "loaded" in capsys.readouterr().out

    def test_single_expert_run_is_tagged_as_the_ensembling_baseline(self, tmp_path):
        config = make_config(
            tmp_path, model={"layer_dims": [4, 6, 3], "num_experts": 1}
        )
        main(["train", str(config)])
        manifest = load_json(tmp_path / "run" / "manifest.json")
        assert manifest["tag"] == "ensembling-baseline"

    def test_csv_data_paths_resolve_relative_to_the_config(self, tmp_path):
        ds = generate_synthetic_dataset()
        save_csv(tmp_path / "train.csv", ds)
        config = make_config(tmp_path, data={"csv": "train.csv"})
        assert main(["train", str(config)]) == 0

    def test_split_block_trains_on_the_first_part(self, tmp_path):
        config = make_config(tmp_path)
        doc = json.loads(config.read_text())
        doc["data"]["split"] = {"fractions": [0.8, 0.2], "seed": 1}
        config.write_text(json.dumps(doc))
        main(["train", str(config)])
        manifest = load_json(tmp_path / "run" / "manifest.json")
        assert manifest["train_samples"] == 72


def generate_synthetic_dataset():
    from moe_forge.data import SyntheticSpec

    spec = SyntheticSpec(
        num_classes=3, modes_per_class=1, dim=4, mode_stddev=0.5,
        samples_per_mode=30, seed=5,
    )
    return generate_synthetic(spec).dataset


class TestEval:
    @pytest.fixture
    def trained(self, tmp_path):
        config = make_config(tmp_path)
        main(["train", str(config)])
        return tmp_path / "run" / "model.json"

    def test_prints_base_and_routed_accuracy(self, trained, tmp_path, capsys):
        data = eval_data_file(tmp_path)
        assert main(["eval", str(trained), str(data)]) == 0
        out = capsys.readouterr().out
        assert "base accuracy:" in out
        assert "top-1 routed accuracy:" in out
        assert "mean MACs (top-1 routing):" in out

    def test_eval_accepts_csv_data(self, trained, tmp_path):
        ds = generate_synthetic_dataset()
        save_csv(tmp_path / "eval.csv", ds)
        assert main(["eval", str(trained), str(tmp_path / "eval.csv")]) == 0

    def test_threshold_sweep_prints_and_writes_curves(self, trained, tmp_path, capsys):
        data = eval_data_file(tmp_path)
        out_dir = tmp_path / "evalout"
        code = main(
            ["eval", str(trained), str(data), "--taus", "0,0.01,0.1,1", "--out", str(out_dir)]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert CURVE_HEADER in stdout
        curve_lines = (out_dir / "tradeoff.csv").read_text().splitlines()
        assert curve_lines[0] == CURVE_HEADER
        assert len(curve_lines) == 5
        assert curve_lines[1].startswith("0.0,")
        assert curve_lines[4].startswith("1.0,")
        envelope_lines = (out_dir / "envelope.csv").read_text().splitlines()
        assert envelope_lines[0] == CURVE_HEADER
        assert 2 <= len(envelope_lines) <= len(curve_lines)

    def test_analyze_writes_every_table(self, trained, tmp_path, capsys):
        data = eval_data_file(tmp_path)
        out_dir = tmp_path / "analysis"
        code = main(["eval", str(trained), str(data), "--analyze", "--out", str(out_dir)])
        assert code == 0
        for name in (
            "specialization.csv",
            "specialization_per_class.csv",
            "reliability.csv",
            "disagreement.csv",
            "disagreement_transitions.csv",
        ):
            assert (out_dir / name).exists(), name
        stdout = capsys.readouterr().out
        assert "oracle per-class accuracy:" in stdout
        spec_lines = (out_dir / "specialization.csv").read_text().splitlines()
        assert spec_lines[0] == "expert,class_0,class_1,class_2"
        rel_lines = (out_dir / "reliability.csv").read_text().splitlines()
        assert rel_lines[0] == "bin_low,bin_high,count,accuracy"
        assert len(rel_lines) == 11

    def test_analyze_without_out_dir_is_a_usage_error(self, trained, tmp_path, capsys):
        data = eval_data_file(tmp_path)
        assert main(["eval", str(trained), str(data), "--analyze"]) == 2
        assert "--out" in capsys.readouterr().err

    def test_dimension_mismatch_is_a_usage_error(self, trained, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(
            json.dumps(
                {
                    "synthetic": {
                        "num_classes": 3, "modes_per_class": 1, "dim": 5,
                        "mode_stddev": 0.5, "samples_per_mode": 5, "seed": 1,
                    }
                }
            )
        )
        assert main(["eval", str(trained), str(bad)]) == 2

    def test_out_of_range_tau_is_a_runtime_error(self, trained, tmp_path, capsys):
        data = eval_data_file(tmp_path)
        assert main(["eval", str(trained), str(data), "--taus", "0,1.5"]) == 1
        assert "tau" in capsys.readouterr().err


class TestAblate:
    def test_gamma_axis_labels_the_default(self, tmp_path, capsys):
        config = make_config(tmp_path)
        code = main(["ablate", str(config), "--axis", "gamma", "--values", "0.05,0.2"])
        assert code == 0
        summary = (tmp_path / "run" / "ablate" / "gamma" / "summary.csv").read_text().splitlines()
        assert summary[0] == "axis_value,seed,accuracy,mean_macs,label"
        assert summary[1].startswith("0.05,3,") and summary[1].endswith(",default")
        assert summary[2].startswith("0.2,3,") and summary[2].endswith(",")
        assert (tmp_path / "run" / "ablate" / "gamma" / "0.05" / "model.json").exists()

    def test_single_expert_value_gets_the_baseline_label(self, tmp_path):
        config = make_config(tmp_path)
        main(["ablate", str(config), "--axis", "num_experts", "--values", "1,2"])
        summary = (
            tmp_path / "run" / "ablate" / "num_experts" / "summary.csv"
        ).read_text().splitlines()
        assert summary[1].endswith(",ensembling-baseline")
        assert summary[2].endswith(",")

    def test_refinement_schedule_axis_runs(self, tmp_path):
        config = make_config(tmp_path)
        code = main(["ablate", str(config), "--axis", "n_e_schedule", "--values", "0,2"])
        assert code == 0
        summary = (
            tmp_path / "run" / "ablate" / "n_e_schedule" / "summary.csv"
        ).read_text().splitlines()
        assert len(summary) == 3

    def test_out_of_range_shared_prefix_is_a_usage_error(self, tmp_path, capsys):
        config = make_config(tmp_path)
        code = main(["ablate", str(config), "--axis", "shared_prefix", "--values", "0,1"])
        assert code == 2
        assert "shared_prefix" in capsys.readouterr().err

    def test_unknown_axis_is_a_usage_error(self, tmp_path, capsys):
        config = make_config(tmp_path)
        assert main(["ablate", str(config), "--axis", "dropout", "--values", "1"]) == 2


class TestConfigErrors:
    def test_unknown_top_level_key(self, tmp_path, capsys):
        config = make_config(tmp_path, optimizer="adam")
        assert main(["train", str(config)]) == 2
        assert "unknown key optimizer" in capsys.readouterr().err

    def test_unknown_nested_key_names_the_dotted_path(self, tmp_path, capsys):
        config = make_config(
            tmp_path,
            train={"sgd_base": {"epochs": 2, "weight_decay": 0.1}},
        )
        assert main(["train", str(config)]) == 2
        assert "train.sgd_base.weight_decay" in capsys.readouterr().err

    def test_invalid_json_reports_the_line(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "seed": 3,\n}\n')
        assert main(["train", str(path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", str(tmp_path / "nope.json")]) == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_required_block(self, tmp_path, capsys):
        config = make_config(tmp_path)
        doc = json.loads(config.read_text())
        del doc["model"]
        config.write_text(json.dumps(doc))
        assert main(["train", str(config)]) == 2
        assert "model" in capsys.readouterr().err

    def test_unknown_ensembler_kind(self, tmp_path, capsys):
        config = make_config(
            tmp_path, model={"layer_dims": [4, 6, 3], "num_experts": 2, "ensembler": "boosting"}
        )
        assert main(["train", str(config)]) == 2
        assert "ensembler" in capsys.readouterr().err

    def test_both_data_sources_rejected(self, tmp_path, capsys):
        config = make_config(tmp_path)
        doc = json.loads(config.read_text())
        doc["data"]["csv"] = "also.csv"
        config.write_text(json.dumps(doc))
        assert main(["train", str(config)]) == 2
        assert "exactly one" in capsys.readouterr().err


class TestWorkerConfig:
    def config_doc(self, tmp_path) -> dict:
        return json.loads(make_config(tmp_path).read_text())

    def test_environment_sets_the_default_worker_count(self, tmp_path, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "4")
        plan = _plan_from_config(self.config_doc(tmp_path))
        assert plan.workers == 4

    def test_explicit_config_key_beats_the_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "4")
        doc = self.config_doc(tmp_path)
        doc["workers"] = 2
        assert _plan_from_config(doc).workers == 2

    def test_default_is_serial(self, tmp_path, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert _plan_from_config(self.config_doc(tmp_path)).workers == 1
