import csv
import json
import os

import numpy as np
import pytest

from deconflow.cli import main


def run(argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    rc = run(["simulate", "--n", 1, "--linear", "--beta", 1.5, "--samples", 600,
              "--seed", 7, "--target-mi", 0.45, "--out", d])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def trained(sim_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    ckpt = d / "model.ckpt"
    tlog = d / "trainlog.csv"
    rc = run(["train", "--data", sim_dir / "data.csv", "--out", ckpt,
              "--trainlog", tlog, "--components", 4, "--layout", "linear",
              "--restarts", 2, "--epochs", 60, "--seed", 5])
    assert rc == 0
    return ckpt, tlog


class TestSimulate:
    def test_outputs_and_shape(self, sim_dir):
        rows = read_rows(sim_dir / "data.csv")
        assert rows[0] == ["x1", "y"]
        assert len(rows) == 601
        assert (sim_dir / "scenario.json").exists()
        labels = read_rows(sim_dir / "labels.csv")
        assert labels[0] == ["l", "q", "z_x1", "z_y"]

    def test_missing_output_dir_fails(self, tmp_path):
        rc = run(["simulate", "--beta", 1.0, "--samples", 10,
                  "--out", tmp_path / "does_not_exist"])
        assert rc == 2

    def test_same_seed_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir()
        b.mkdir()
        for out in (a, b):
            assert run(["simulate", "--n", 2, "--beta", 0.5, "--samples", 50,
                        "--seed", 3, "--out", out]) == 0
        for name in ("data.csv", "labels.csv", "scenario.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestTrain:
    def test_checkpoint_slope_readout(self, trained):
        from deconflow.flow import extract_linear_slope
        from deconflow.training import load_checkpoint
        ckpt, _ = trained
        model = load_checkpoint(ckpt)
        slope = extract_linear_slope(model)
        assert np.isfinite(slope)

    def test_trainlog_sections_and_best_mark(self, trained):
        _, tlog = trained
        rows = read_rows(tlog)
        assert rows[0] == ["restart", "epoch", "train_nll", "val_nll", "is_best_restart"]
        restarts = {r[0] for r in rows[1:]}
        assert restarts == {"0", "1"}
        assert {r[4] for r in rows[1:]} == {"0", "1"}

    def test_malformed_csv_names_cell(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("x1,y\n1.0,2.0\n1.5,oops\n")
        rc = run(["train", "--data", bad, "--out", tmp_path / "m.ckpt",
                  "--components", 1])
        assert rc == 2
        err = capsys.readouterr().err
        assert "line 3" in err and "'y'" in err and "oops" in err

    def test_missing_components_is_usage_error(self, sim_dir, tmp_path):
        rc = run(["train", "--data", sim_dir / "data.csv",
                  "--out", tmp_path / "m.ckpt"])
        assert rc == 1

    def test_rerun_is_byte_identical(self, sim_dir, tmp_path):
        blobs = []
        for name in ("a", "b"):
            ckpt = tmp_path / f"{name}.ckpt"
            rc = run(["train", "--data", sim_dir / "data.csv", "--out", ckpt,
                      "--components", 2, "--layout", "linear", "--restarts", 1,
                      "--epochs", 15, "--seed", 11])
            assert rc == 0
            blobs.append(ckpt.read_bytes())
        assert blobs[0] == blobs[1]

    def test_config_file_overridden_by_flags(self, sim_dir, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"n_components": 2, "layout": "linear",
                                   "restarts": 1, "max_epochs": 5}))
        ckpt = tmp_path / "m.ckpt"
        rc = run(["train", "--data", sim_dir / "data.csv", "--out", ckpt,
                  "--config", cfg, "--epochs", 8, "--seed", 1])
        assert rc == 0
        meta = json.loads(ckpt.read_text())["meta"]
        assert meta["config"]["max_epochs"] == 8
        assert meta["config"]["n_components"] == 2

    def test_unknown_config_key_rejected(self, sim_dir, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"n_components": 2, "bogus": 1}))
        rc = run(["train", "--data", sim_dir / "data.csv",
                  "--out", tmp_path / "m.ckpt", "--config", cfg])
        assert rc == 1


class TestAdjust:
    def test_default_queries_are_rows(self, sim_dir, trained, tmp_path):
        ckpt, _ = trained
        out = tmp_path / "do.csv"
        rc = run(["adjust", "--checkpoint", ckpt, "--data", sim_dir / "data.csv",
                  "--n-draws", 50, "--seed", 1, "--out", out, "--slopes"])
        assert rc == 0
        rows = read_rows(out)
        assert rows[0] == ["x1", "theta_hat", "mc_stderr", "n_p", "in_support"]
        assert len(rows) == 601
        slopes = read_rows(str(out) + ".slopes.csv")
        assert slopes[0] == ["cause", "beta_adjusted"]
        assert abs(float(slopes[1][1]) - 1.5) < 0.3

    def test_out_of_support_query_flagged(self, sim_dir, trained, tmp_path):
        ckpt, _ = trained
        qfile = tmp_path / "q.csv"
        qfile.write_text("x1\n3.5\n99.0\n")
        out = tmp_path / "do.csv"
        with pytest.warns(UserWarning):
            rc = run(["adjust", "--checkpoint", ckpt, "--data", sim_dir / "data.csv",
                      "--queries", qfile, "--n-draws", 20, "--out", out])
        assert rc == 0
        rows = read_rows(out)
        assert rows[1][-1] == "1"
        assert rows[2][-1] == "0"

    def test_wrong_dimension_data(self, trained, tmp_path):
        ckpt, _ = trained
        wide = tmp_path / "wide.csv"
        wide.write_text("a,b,c\n1,2,3\n4,5,6\n")
        rc = run(["adjust", "--checkpoint", ckpt, "--data", wide,
                  "--out", tmp_path / "do.csv"])
        assert rc == 2


class TestEval:
    def test_perfect_estimates_rmse_zero(self, sim_dir, tmp_path):
        from deconflow.simulate import load_scenario, theta_star
        scenario = load_scenario(sim_dir / "scenario.json")
        data = np.array(read_rows(sim_dir / "data.csv")[1:], dtype=float)
        oracle = theta_star(scenario, data[:, :1])
        est = tmp_path / "est.csv"
        with open(est, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "theta_hat"])
            w.writerows([[repr(float(x)), repr(float(t))] for x, t in zip(data[:, 0], oracle)])
        out = tmp_path / "report.csv"
        rc = run(["eval", "--estimates", est, "--scenario", sim_dir / "scenario.json",
                  "--data", sim_dir / "data.csv", "--out", out])
        assert rc == 0
        rows = read_rows(out)
        assert float(rows[1][rows[0].index("rmse")]) == 0.0
        assert float(rows[1][rows[0].index("rmse_naive")]) > 0.0


class TestSweep:
    def test_mini_sweep_idempotent(self, tmp_path):
        cfg = {
            "train": {"n_components": 4, "layout": "linear", "restarts": 1,
                      "max_epochs": 25, "seed": 0, "patience": 8, "lr_drops": 0},
            "n_draws": 40,
            "cells": [
                {"n": 1, "k_l": 2, "k_q": 2, "beta": 1.0, "target_mi": 0.3,
                 "scenario_seed": 1, "data_seed": 2, "n_samples": 400,
                 "identity_maps": True},
            ],
        }
        cfg_path = tmp_path / "sweep.json"
        cfg_path.write_text(json.dumps(cfg))
        ledger = tmp_path / "ledger.csv"
        assert run(["sweep", "--config", cfg_path, "--ledger", ledger]) == 0
        first = ledger.read_bytes()
        assert run(["sweep", "--config", cfg_path, "--ledger", ledger]) == 0
        assert ledger.read_bytes() == first  # rerun appends nothing
        rows = read_rows(ledger)
        assert rows[1][rows[0].index("status")] == "ok"

    def test_bad_config_usage_error(self, tmp_path):
        cfg_path = tmp_path / "sweep.json"
        cfg_path.write_text(json.dumps({"cells": []}))
        assert run(["sweep", "--config", cfg_path, "--ledger", tmp_path / "l.csv"]) == 1


def make_tabular_csv(path, seed=0, n=800):
    """Three integer-coded causes, two discrete confounders, linear outcome."""
    rng = np.random.default_rng(seed)
    h = rng.integers(0, 2, size=n)
    v1 = (h + (rng.random(n) < 0.15)) % 2
    v2 = rng.integers(0, 3, size=n)
    causes = np.column_stack([
        np.clip(np.round(1.2 * h + rng.normal(1.5, 0.6, n)), 0, 4),
        np.clip(np.round(0.8 * h + rng.normal(2.0, 0.7, n)), 0, 4),
        np.clip(np.round(rng.normal(2.0, 0.8, n)), 0, 4),
    ])
    y = causes @ [0.5, -0.3, 0.2] + 1.5 * h + 0.1 * rng.standard_normal(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["age", "visits", "extra", "v1", "v2", "weight"])
        for i in range(n):
            w.writerow([int(causes[i, 0]), int(causes[i, 1]), int(causes[i, 2]),
                        int(v1[i]), int(v2[i]), repr(float(y[i]))])


class TestTabular:
    def test_comparison_table(self, tmp_path):
        data = tmp_path / "tab.csv"
        make_tabular_csv(data)
        out = tmp_path / "cmp.csv"
        rc = run(["tabular", "--data", data, "--causes", "age,visits,extra",
                  "--confounders", "v1,v2", "--target", "weight",
                  "--components", 2, "--layout", "blocks", "--blocks", 4,
                  "--hidden", "32,32", "--restarts", 1, "--epochs", 40,
                  "--seed", 3, "--n-draws", 100, "--out", out])
        assert rc == 0
        rows = read_rows(out)
        assert rows[0] == ["cause", "beta_controlled", "beta_naive", "beta_adjusted"]
        assert [r[0] for r in rows[1:]] == ["age", "visits", "extra"]

    def test_missing_column_usage_error(self, tmp_path):
        data = tmp_path / "tab.csv"
        make_tabular_csv(data)
        rc = run(["tabular", "--data", data, "--causes", "nope", "--target", "weight",
                  "--components", 1, "--out", tmp_path / "cmp.csv"])
        assert rc == 1

    def test_empty_confounders_omits_controlled(self, tmp_path, capsys):
        data = tmp_path / "tab.csv"
        make_tabular_csv(data)
        out = tmp_path / "cmp.csv"
        rc = run(["tabular", "--data", data, "--causes", "age", "--target", "weight",
                  "--components", 2, "--layout", "linear", "--restarts", 1,
                  "--epochs", 25, "--n-draws", 50, "--out", out])
        assert rc == 0
        assert "beta_controlled" not in read_rows(out)[0]
        assert "omitted" in capsys.readouterr().out

    def test_jitter_seed_reproducible(self, tmp_path):
        data = tmp_path / "tab.csv"
        make_tabular_csv(data)
        outs = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            rc = run(["tabular", "--data", data, "--causes", "age", "--target",
                      "weight", "--components", 2, "--layout", "linear",
                      "--restarts", 1, "--epochs", 20, "--jitter-seed", 9,
                      "--n-draws", 50, "--out", out])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
