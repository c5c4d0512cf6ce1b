import json

import numpy as np
import pandas as pd
import pytest

from src.cli import exit_code, main, sweep_points
from src.dataset import generate, load, save
from src.exceptions import InvalidConfigError, MalformedFileError, NumericalAbortError
from src.models import GenConfig, ModelConfig
from src.network import GcdModel, load_checkpoint, save_checkpoint
from src.utils import derive_seed, load_experiment_config


SMALL = ["num_classes=4", "samples_per_class=10", "feature_dim=4", "hidden_dim=6", "projection_dim=3",
         "epochs=2", "batch_size=16", "tau_t_warmup_epochs=1", "data_seed=1", "seed=2"]


def with_sets(*args, overrides=SMALL):
    argv = list(args)
    for item in overrides:
        argv += ["--set", item]
    return argv


@pytest.fixture
def trained_run(tmp_path):
    run_dir = tmp_path / "run"
    assert main(with_sets("train", "--out", str(run_dir))) == 0
    return run_dir


@pytest.fixture
def dataset_file(tmp_path):
    path = tmp_path / "data.gcds"
    assert main(with_sets("gen", "--out", str(path))) == 0
    return path


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        code = main(["train", "--out", str(tmp_path), "--set", "bogus=1"])
        assert code == 2
        assert "error=invalid_config exit=2 reason=" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--dataset", str(tmp_path / "missing.gcds")])
        assert code == 3
        assert "error=io_error exit=3 reason=" in capsys.readouterr().err

    def test_malformed_dataset(self, tmp_path, capsys):
        path = tmp_path / "broken.gcds"
        path.write_bytes(b"not a dataset")
        assert main(["kmeans", "--dataset", str(path)]) == 3
        assert "error=malformed_file" in capsys.readouterr().err

    @pytest.mark.parametrize("error, expected", [
        (InvalidConfigError("x"), ("invalid_config", 2)),
        (MalformedFileError("x"), ("malformed_file", 3)),
        (FileNotFoundError("x"), ("io_error", 3)),
        (NumericalAbortError("x"), ("numerical_abort", 4)),
        (RuntimeError("x"), ("internal", 1)),
    ])
    def test_mapping(self, error, expected):
        assert exit_code(error) == expected


class TestGenAndTrain:
    def test_gen(self, dataset_file):
        ds = load(dataset_file)
        assert ds.num_classes == 4
        assert ds.num_samples == 40
        assert ds.feature_dim == 4

    def test_run_directory(self, trained_run):
        names = {path.name for path in trained_run.iterdir()}
        assert {"config.yaml", "model.ckpt", "metrics.jsonl", "report.json", "histogram.csv"} <= names
        lines = (trained_run / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(line)["epoch"] for line in lines] == [0, 1]
        report = json.loads((trained_run / "report.json").read_text())
        assert 0.0 <= report["acc"]["acc_all"] <= 1.0
        assert len(pd.read_csv(trained_run / "histogram.csv")) == 4

    def test_resolved_config_reloads(self, trained_run):
        resolved = load_experiment_config(trained_run / "config.yaml")
        assert resolved == load_experiment_config(overrides=SMALL)

    def test_identical_configs_give_identical_bytes(self, tmp_path, trained_run):
        again = tmp_path / "again"
        assert main(with_sets("train", "--out", str(again))) == 0
        for name in ("metrics.jsonl", "model.ckpt"):
            assert (trained_run / name).read_bytes() == (again / name).read_bytes()

    def test_rerun_from_resolved_config(self, tmp_path, trained_run):
        again = tmp_path / "from_config"
        assert main(["train", "--config", str(trained_run / "config.yaml"), "--out", str(again)]) == 0
        assert (trained_run / "model.ckpt").read_bytes() == (again / "model.ckpt").read_bytes()


class TestEval:
    def test_untrained_model_scores_near_chance(self, tmp_path):
        ds = generate(GenConfig(num_classes=10, samples_per_class=20, feature_dim=8, class_radius=0.5, seed=0))
        dataset = save(ds, tmp_path / "data.gcds")
        model = GcdModel.init(ModelConfig(feature_dim=8, hidden_dim=16, projection_dim=8, num_prototypes=10))
        checkpoint = save_checkpoint(model, tmp_path / "model.ckpt")

        assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset)]) == 0
        report = json.loads((tmp_path / "eval" / "report.json").read_text())
        assert 0.02 <= report["acc"]["acc_all"] <= 0.35
        assert report["extra"]["source"] == "parametric"


class TestKmeans:
    @pytest.mark.parametrize("mode", ["semi", "plain"])
    def test_on_raw_features(self, tmp_path, dataset_file, mode):
        out = tmp_path / mode
        assert main(["kmeans", "--dataset", str(dataset_file), "--mode", mode, "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["extra"]["source"] == f"{mode}_kmeans"
        assert report["extra"]["k"] == 4
        assert report["acc"]["num_samples"] == int(np.sum(~load(dataset_file).labelled_mask))

    def test_on_model_features(self, tmp_path, trained_run, dataset_file):
        out = tmp_path / "matched"
        assert main(["kmeans", "--dataset", str(dataset_file), "--checkpoint", str(trained_run / "model.ckpt"),
                     "--out", str(out)]) == 0
        extra = json.loads((out / "report.json").read_text())["extra"]
        assert extra["parametric_seconds"] >= 0.0
        assert extra["kmeans_seconds"] >= 0.0
        assert 0.0 <= extra["parametric"]["acc_all"] <= 1.0

    def test_model_and_dataset_width_must_agree(self, tmp_path, trained_run):
        wide = save(generate(GenConfig(num_classes=4, samples_per_class=10, feature_dim=7)), tmp_path / "w.gcds")
        code = main(["kmeans", "--dataset", str(wide), "--checkpoint", str(trained_run / "model.ckpt")])
        assert code != 0


class TestDiagnose:
    def test_writes_three_tables(self, tmp_path, trained_run):
        out = tmp_path / "tables"
        code = main(["diagnose", str(trained_run / "report.json"),
                     "--metrics", str(trained_run / "metrics.jsonl"), "--out", str(out)])
        assert code == 0
        assert {p.name for p in out.iterdir()} == {"taxonomy.csv", "histograms.csv", "evolution.csv"}
        taxonomy = pd.read_csv(out / "taxonomy.csv")
        assert taxonomy.loc[0, "run"] == "run"
        assert abs(taxonomy.loc[0, "error_mass"] + taxonomy.loc[0, "acc_all"] - 1.0) < 1e-9
        assert len(pd.read_csv(out / "evolution.csv")) == 2


class TestSweep:
    def test_points(self):
        assert sweep_points("k_ratio", [1.0, 2.0], 5) == [(1.0, {"num_prototypes": 5}),
                                                          (2.0, {"num_prototypes": 10})]
        assert sweep_points("eps", [0, 2], 5) == [(0, {"entropy_weight": 0}), (2, {"entropy_weight": 2})]
        with pytest.raises(InvalidConfigError):
            sweep_points("depth", [1], 5)

    def test_entropy_sweep(self, tmp_path):
        out = tmp_path / "sweep"
        assert main(with_sets("sweep", "--axis", "eps", "--values", "0", "1", "--out", str(out))) == 0
        assert (out / "eps_0_seed0" / "report.json").exists()
        assert (out / "eps_1_seed0" / "report.json").exists()
        summary = pd.read_csv(out / "summary.csv")
        assert summary["sweep_value"].tolist() == [0, 1]
        assert summary["seed"].nunique() == 1

    def test_runs_share_one_dataset(self, tmp_path):
        out = tmp_path / "sweep"
        assert main(with_sets("sweep", "--axis", "k", "--values", "4", "6", "--out", str(out))) == 0
        assert load_checkpoint(out / "k_6_seed0" / "model.ckpt").num_prototypes == 6
        assert (out / "dataset.gcds").exists()

    def test_invalid_value(self, tmp_path, capsys):
        code = main(with_sets("sweep", "--axis", "supervision", "--values", "telepathy", "--out", str(tmp_path)))
        assert code == 2
        assert "error=invalid_config" in capsys.readouterr().err

    def test_preset_sweep_applies_each_preset(self, tmp_path):
        out = tmp_path / "sweep"
        assert main(with_sets("sweep", "--axis", "preset", "--values", "sl", "jt", "--out", str(out))) == 0
        sl = load_experiment_config(out / "preset_sl_seed0" / "config.yaml")
        jt = load_experiment_config(out / "preset_jt_seed0" / "config.yaml")
        assert (sl.supervision, sl.classifier_input, sl.training) == ("self_label", "post_projector", "decoupled")
        assert (jt.supervision, jt.training, jt.teacher_warmup) == ("self_distil", "joint", True)

    def test_explicit_keys_survive_a_preset_base(self, tmp_path):
        out = tmp_path / "sweep"
        overrides = SMALL + ["preset=sl", "supervision=oracle"]
        assert main(with_sets("sweep", "--axis", "eps", "--values", "0", "--out", str(out),
                              overrides=overrides)) == 0
        resolved = load_experiment_config(out / "eps_0_seed0" / "config.yaml")
        assert (resolved.supervision, resolved.classifier_input) == ("oracle", "post_projector")

    def test_config_file_of_key_value_lines(self, tmp_path):
        path = tmp_path / "experiment.txt"
        path.write_text("\n".join(SMALL) + "\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 0
        assert load_experiment_config(tmp_path / "run" / "config.yaml") == load_experiment_config(overrides=SMALL)

    def test_every_value_trains_with_the_same_seeds(self, tmp_path):
        out = tmp_path / "sweep"
        assert main(with_sets("sweep", "--axis", "eps", "--values", "0", "2", "--seeds", "0", "5",
                              "--out", str(out))) == 0
        summary = pd.read_csv(out / "summary.csv")
        expected = [derive_seed(0, 0), derive_seed(5, 1)]
        for _, group in summary.groupby("sweep_value"):
            assert group["seed"].tolist() == expected
