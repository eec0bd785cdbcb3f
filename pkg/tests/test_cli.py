import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from cvvls import cli
from cvvls.crate_net import init_params, load_checkpoint
from cvvls.errors import NumericError
from cvvls.evaluation import EvalReport, coding_rate_profile, prf1
from cvvls.pipeline import (Dataset, build_dataset, crate_config_for, evaluate,
                            scenario_grid, simulate)
from cvvls.rco import RCOFrame
from cvvls.trafficsim import warmup_cycles_for

TINY = """
[run]
cycles = 6
epochs = 2
batch_size = 16
[model]
dim = 8
heads = 2
n_encoder = 2
n_decoder = 1
"""
GRID = ["--reds", "30", "--vcs", "0.3,0.6"]


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): _digest(p) for p in sorted(directory.rglob("*"))
            if p.is_file() and not p.name.endswith("_manifest.json")}


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    return root


@pytest.fixture(scope="module")
def dataset_dir(work):
    out = work / "ds"
    assert _run("dataset", "--config", work / "tiny.ini", *GRID, "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def model_path(work, dataset_dir):
    out = work / "tr"
    assert _run("train", "--config", work / "tiny.ini", "--data", dataset_dir, "--out-dir", out) == 0
    return out / "model.ckpt"


class TestUsage:
    def test_no_command(self):
        assert _run() == cli.EXIT_USAGE

    def test_version(self, capsys):
        assert _run("--version") == 0
        assert "cvvls" in capsys.readouterr().out

    def test_missing_dataset(self, tmp_path):
        assert _run("train", "--data", tmp_path / "nope", "--out-dir", tmp_path) == cli.EXIT_USAGE

    def test_missing_model(self, dataset_dir, tmp_path):
        rc = _run("eval", "--data", dataset_dir, "--model", tmp_path / "x.ckpt", "--out-dir", tmp_path)
        assert rc == cli.EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert _run("simulate", "--config", tmp_path / "none.ini", "--out-dir", tmp_path) == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "bad.ini").write_text("[train]\nwarp = 9\n")
        rc = _run("simulate", "--config", tmp_path / "bad.ini", "--reds", "", "--out-dir", tmp_path)
        assert rc == cli.EXIT_USAGE

    def test_bad_list(self, tmp_path):
        assert _run("simulate", "--reds", "a,b", "--out-dir", tmp_path) == cli.EXIT_USAGE

    def test_numeric_failure(self, work, dataset_dir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise NumericError("loss became non-finite")
        monkeypatch.setattr(cli, "train", boom)
        rc = _run("train", "--config", work / "tiny.ini", "--data", dataset_dir, "--out-dir", tmp_path)
        assert rc == cli.EXIT_NUMERIC


class TestSimulate:
    def test_empty_grid(self, tmp_path):
        assert _run("simulate", "--reds", "", "--out-dir", tmp_path) == 0
        assert not list(tmp_path.glob("*.csv"))

    def test_full_grid_and_rerun(self, work, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _run("simulate", "--config", work / "tiny.ini", "--out-dir", a) == 0
        assert len(list(a.glob("*.csv"))) == 9 and len(list(a.glob("*.csv.json"))) == 9
        assert _run("simulate", "--config", work / "tiny.ini", "--out-dir", b, "--jobs", "2") == 0
        assert _tree(a) == _tree(b)

    def test_names_match_specs(self, work, tmp_path):
        _run("simulate", "--config", work / "tiny.ini", *GRID, "--seed", "3", "--out-dir", tmp_path)
        expected = {s.name + ".csv" for s in scenario_grid(0.4, 3, 6, [30.0], [0.3, 0.6])}
        assert {p.name for p in tmp_path.glob("*.csv")} == expected

    def test_manifest(self, work, tmp_path):
        _run("simulate", "--config", work / "tiny.ini", *GRID, "--out-dir", tmp_path)
        man = json.loads((tmp_path / "simulate_manifest.json").read_text())
        assert man["command"] == "simulate" and len(man["config_hash"]) == 16
        assert all(Path(p).exists() for p in man["outputs"])
        for res in man["results"].values():
            assert res["red_light_violations"] == 0 and res["min_gap_m"] > 0

    def test_env_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
        assert _run("simulate", "--reds", "") == 0
        assert (tmp_path / "simulate" / "simulate_manifest.json").exists()


class TestDataset:
    def test_sample_count(self, dataset_dir):
        data = Dataset.load(dataset_dir)
        post = 6 - warmup_cycles_for(6)
        assert len(data) == 2 * post * 60  # two scenarios, 60 s cycle, 1 Hz
        assert data.is_test.sum() == 2 * 60

    def test_reload_bit_identical(self, dataset_dir):
        specs = scenario_grid(0.4, 0, 6, [30.0], [0.3, 0.6])
        direct = build_dataset([simulate(s) for s in specs], [s.name for s in specs], 4)
        loaded = Dataset.load(dataset_dir)
        assert np.array_equal(direct.inputs, loaded.inputs)
        assert np.array_equal(direct.targets, loaded.targets)
        assert np.array_equal(direct.is_test, loaded.is_test)

    def test_history_too_long(self, work, tmp_path):
        rc = _run("dataset", "--config", work / "tiny.ini", *GRID, "--k", "100", "--out-dir", tmp_path)
        assert rc == cli.EXIT_DATA

    def test_empty_grid_is_usage_error(self, tmp_path):
        assert _run("dataset", "--reds", "", "--out-dir", tmp_path) == cli.EXIT_USAGE


class TestTrain:
    def test_outputs(self, model_path):
        out = model_path.parent
        rows = list(csv.DictReader(open(out / "loss_curve.csv")))
        assert [int(r["epoch"]) for r in rows] == [0, 1]
        assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["epoch_000.ckpt",
                                                                        "epoch_001.ckpt"]
        man = json.loads((out / "train_manifest.json").read_text())
        assert man["settings"]["train_config"]["epochs"] == 2

    def test_zero_lr(self, work, dataset_dir, tmp_path):
        rc = _run("train", "--config", work / "tiny.ini", "--data", dataset_dir,
                  "--learning-rate", "0", "--epochs", "1", "--out-dir", tmp_path)
        assert rc == 0
        params, _, _ = load_checkpoint(tmp_path / "model.ckpt")
        data = Dataset.load(dataset_dir)
        fresh = init_params(crate_config_for(data, dim=8, heads=2, n_encoder=2, n_decoder=1))
        # weight decay is decoupled but scaled by the zero learning rate
        for name, t in fresh.tensors.items():
            assert np.array_equal(params.tensors[name], t)

    def test_flag_overrides_config(self, work, dataset_dir, tmp_path):
        _run("train", "--config", work / "tiny.ini", "--data", dataset_dir, "--epochs", "1",
             "--out-dir", tmp_path)
        assert len(list(csv.DictReader(open(tmp_path / "loss_curve.csv")))) == 1

    def test_resume_equivalence(self, work, dataset_dir, model_path, tmp_path):
        ini = work / "tiny.ini"
        assert _run("train", "--config", ini, "--data", dataset_dir, "--epochs", "1",
                    "--out-dir", tmp_path) == 0
        assert _run("train", "--config", ini, "--data", dataset_dir, "--resume",
                    tmp_path / "checkpoints" / "epoch_000.ckpt", "--out-dir", tmp_path) == 0
        assert _digest(tmp_path / "model.ckpt") == _digest(model_path)
        assert (tmp_path / "loss_curve.csv").read_text() == \
            (model_path.parent / "loss_curve.csv").read_text()

    def test_idempotent_and_inputs_untouched(self, work, dataset_dir, model_path, tmp_path):
        before = _tree(dataset_dir)
        _run("train", "--config", work / "tiny.ini", "--data", dataset_dir, "--out-dir", tmp_path)
        assert _tree(dataset_dir) == before
        assert _tree(tmp_path) == _tree(model_path.parent)


@pytest.fixture(scope="module")
def eval_dir(work, dataset_dir, model_path):
    out = work / "ev"
    assert _run("eval", "--data", dataset_dir, "--model", model_path, "--out-dir", out) == 0
    return out


class TestEval:
    def test_table_shape(self, eval_dir):
        rows = list(csv.reader(open(eval_dir / "table1.csv")))
        assert rows[0] == cli.TABLE_COLUMNS
        assert [r[1] for r in rows[1:]] == ["0.3", "0.6", "all"] * 2
        assert {r[2] for r in rows[1:]} == {"model", "interpolation_baseline"}

    def test_recompute_from_dump(self, eval_dir):
        for name in ("report_model.json", "report_interpolation_baseline.json"):
            rep = json.loads((eval_dir / name).read_text())
            tp = sum(s["tp"] for s in rep["per_scenario"].values())
            fp = sum(s["fp"] for s in rep["per_scenario"].values())
            fn = sum(s["fn"] for s in rep["per_scenario"].values())
            assert (tp, fp, fn) == (rep["tp"], rep["fp"], rep["fn"])
            assert prf1(tp, fp, fn).f1 == rep["f1"]

    def test_no_baseline(self, dataset_dir, model_path, tmp_path):
        _run("eval", "--data", dataset_dir, "--model", model_path, "--no-baseline", "--out-dir", tmp_path)
        assert not (tmp_path / "report_interpolation_baseline.json").exists()

    def test_idempotent(self, dataset_dir, model_path, eval_dir, tmp_path):
        _run("eval", "--data", dataset_dir, "--model", model_path, "--out-dir", tmp_path)
        assert _tree(tmp_path) == _tree(eval_dir)

    def test_ground_truth_is_perfect(self, dataset_dir):
        test = Dataset.load(dataset_dir).test
        truth = [RCOFrame(y[..., 0].astype(float), y[..., 1].astype(float)) for y in test.targets]
        rep = evaluate(truth, test)
        assert (rep.precision, rep.recall, rep.f1, rep.rmse) == (1.0, 1.0, 1.0, 0.0)

    def test_empty_test_set(self, dataset_dir, model_path, tmp_path):
        data = Dataset.load(dataset_dir)
        data.is_test[:] = False
        data.save(tmp_path / "ds")
        assert _run("eval", "--data", tmp_path / "ds", "--model", model_path,
                    "--out-dir", tmp_path / "ev") == 0
        rep = json.loads((tmp_path / "ev" / "report_model.json").read_text())
        assert rep["flags"]["empty"] and rep["flags"]["degenerate"]


class TestAnalyze:
    def test_untrained_default_depth(self, dataset_dir, tmp_path):
        data = Dataset.load(dataset_dir)
        from cvvls.crate_net import save_checkpoint
        params = init_params(crate_config_for(data, dim=8, heads=2))
        save_checkpoint(tmp_path / "init.ckpt", params)
        assert _run("analyze", "--data", dataset_dir, "--model", tmp_path / "init.ckpt",
                    "--out-dir", tmp_path) == 0
        rows = list(csv.DictReader(open(tmp_path / "coding_profile.csv")))
        assert [int(r["layer"]) for r in rows] == [1, 2, 3, 4, 5, 6]
        expected = coding_rate_profile(params, data.test.inputs)
        assert [float(r["mean_coding_rate"]) for r in rows] == expected


def _stub_report(f1):
    return EvalReport(0, 0, 0, 0.0, 0.0, f1, 1.0, {})


class TestSweep:
    def test_six_row_tables(self, tmp_path, monkeypatch):
        class Trial:
            def __init__(self, p, k, *a, **kw):
                self.model = _stub_report(k + p)
                self.baseline = _stub_report(0.0)
        monkeypatch.setattr(cli, "run_trial", Trial)
        assert _run("sweep-k", "--out-dir", tmp_path) == 0
        for name in ("table2_f1.csv", "table3_rmse.csv"):
            rows = list(csv.reader(open(tmp_path / name)))
            assert rows[0] == ["k", "p=0.1", "p=0.4", "p=0.7"]
            assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4", "5", "6"]
        rows = list(csv.reader(open(tmp_path / "table2_f1.csv")))
        assert float(rows[3][2]) == pytest.approx(3.4)

    def test_composition(self, work, tmp_path):
        """A singleton sweep cell equals the dataset/train/eval chain run by hand."""
        ini = work / "tiny.ini"
        common = ["--config", ini, "--seed", "1"]
        assert _run("sweep-k", *common, "--k-values", "2", "--penetrations", "0.4", "--epochs", "1",
                    "--out-dir", tmp_path / "sw") == 0
        f1 = float(list(csv.reader(open(tmp_path / "sw" / "table2_f1.csv")))[1][1])
        assert _run("dataset", *common, "--k", "2", "--out-dir", tmp_path / "ds") == 0
        assert _run("train", *common, "--data", tmp_path / "ds", "--epochs", "1",
                    "--out-dir", tmp_path / "tr") == 0
        assert _run("eval", *common, "--data", tmp_path / "ds", "--model", tmp_path / "tr" / "model.ckpt",
                    "--out-dir", tmp_path / "ev") == 0
        rep = json.loads((tmp_path / "ev" / "report_model.json").read_text())
        assert rep["f1"] == f1


class TestPreset:
    def test_desk_preset_settings(self, tmp_path):
        args = cli.build_parser().parse_args(["dataset", "--preset", "desk", "--cycles", "7"])
        s = cli._settings(args)
        assert (s["cycles"], s["batch_size"], s["link_length"]) == (7, 32, 200.0)
        assert cli._sim_base(s).link_length == 200.0
