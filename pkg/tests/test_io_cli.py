import csv
import json

import numpy as np
import pytest

from dmm import numcore
from dmm.cli import aggregate, main, sweep_cells, worker_count
from dmm.errors import ConfigError, ShapeError, ValidationError
from dmm.io import (
    apply_config,
    load_config,
    parse_config_text,
    read_long_csv,
    read_series_csv,
    window,
    write_series_csv,
)
from dmm.selftest import run_selftest
from dmm.train import TrainConfig


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- file formats -------------------------------------------------------------------------------

def test_series_csv_round_trip_exact(tmp_path):
    x = np.random.default_rng(0).standard_normal((4, 3, 2)) * 1e5
    write_series_csv(tmp_path / "s.csv", x)
    assert read_series_csv(tmp_path / "s.csv").tobytes() == x.tobytes()


def test_mask_csv_round_trip(tmp_path):
    r = (np.random.default_rng(1).random((3, 5, 2)) > 0.5).astype(np.int8)
    write_series_csv(tmp_path / "m.csv", r, integer=True)
    np.testing.assert_array_equal(read_series_csv(tmp_path / "m.csv", integer=True), r)


def test_series_csv_rows_in_any_order(tmp_path):
    x = np.arange(12, dtype=float).reshape(2, 3, 2)
    write_series_csv(tmp_path / "s.csv", x)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    (tmp_path / "s.csv").write_text("\n".join([lines[0], *reversed(lines[1:])]))
    np.testing.assert_array_equal(read_series_csv(tmp_path / "s.csv"), x)


@pytest.mark.parametrize(
    "text",
    ["a,b,ch0\n0,0,1\n", "seq,t,ch0\n0,0,1\n0,0,2\n", "seq,t,ch0\n0,0,1\n1,1,1\n"],
)
def test_series_csv_rejects_malformed(tmp_path, text):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(ValidationError):
        read_series_csv(tmp_path / "bad.csv")


def test_mask_csv_rejects_non_binary(tmp_path):
    (tmp_path / "m.csv").write_text("seq,t,ch0\n0,0,2\n")
    with pytest.raises(ValidationError):
        read_series_csv(tmp_path / "m.csv", integer=True)


def test_write_rejects_wrong_rank(tmp_path):
    with pytest.raises(ShapeError):
        write_series_csv(tmp_path / "x.csv", np.zeros((2, 2)))


def test_config_parsing_and_coercion():
    vals = parse_config_text("# comment\nepochs = 3\nlr=0.5  # trailing\nregime = unsupervised\n")
    cfg = apply_config(TrainConfig, vals)
    assert (cfg.epochs, cfg.lr, cfg.regime) == (3, 0.5, "unsupervised")


@pytest.mark.parametrize("text", ["epochs 3", "epochs = 3\nepochs = 4", " = 1"])
def test_config_syntax_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        apply_config(TrainConfig, {"epoch": "3"})
    (tmp_path / "c.cfg").write_text("lr = 1\nbogus = 2\n")
    with pytest.raises(ConfigError, match="bogus"):
        load_config(tmp_path / "c.cfg", {"lr"})


def test_config_bad_value():
    with pytest.raises(ConfigError):
        apply_config(TrainConfig, {"epochs": "three"})


def test_window_slices():
    s = np.arange(20, dtype=float).reshape(10, 2)
    w = window(s, 4, 3)
    assert w.shape == (3, 4, 2)
    np.testing.assert_array_equal(w[1], s[3:7])
    with pytest.raises(ValidationError):
        window(s, 11)


def test_read_long_csv_drops_date_column(tmp_path):
    (tmp_path / "l.csv").write_text("date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n")
    names, data = read_long_csv(tmp_path / "l.csv")
    assert names == ["a", "b"] and data.tolist() == [[1, 2], [3, 4]]


# -- sweep helpers ------------------------------------------------------------------------------------

def test_sweep_expansion():
    cells = sweep_cells({"mechanisms": "mar mnar", "ratios": "0.2,0.4", "variants": "mar", "seeds": "0 1", "epochs": "2"})
    assert len(cells) == 8
    assert {c.train.seed for c in cells} == {0, 1} and all(c.train.epochs == 2 for c in cells)


def test_sweep_with_no_lists_is_an_error():
    with pytest.raises(ConfigError):
        sweep_cells({})
    with pytest.raises(ConfigError):
        sweep_cells({"ratios": ""})


def test_aggregate_takes_median_and_counts_failures():
    base = dict(mechanism="mar", ratio=0.2, variant="MAR", regime="supervised", beta=0.1, gamma=0.1)
    rows = [dict(base, mse=m, mae=1, mcc_z="", mcc_c="", baseline_mse=2, error="") for m in (1.0, 5.0, 2.0)]
    rows.append(dict(base, error="TrainingError: boom"))
    (agg,) = aggregate(rows)
    assert agg["mse"] == 2.0 and agg["n_ok"] == 3 and agg["n_failed"] == 1 and agg["mcc_z"] == ""


def test_worker_count_respects_env(monkeypatch):
    monkeypatch.setenv("DMM_THREADS", "1")
    assert worker_count(10) == 1
    monkeypatch.setenv("DMM_THREADS", "8")
    assert worker_count(3) == 3


# -- command line -------------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--batch", "120", "--seed", "3", "--out", str(d / "gen")]) == 0
    assert main(["mask", "--data", str(d / "gen/series.csv"), "--mechanism", "mnar", "--rate", "0.3",
                 "--out", str(d / "mask")]) == 0
    (d / "train.cfg").write_text("epochs = 2\nbatch_size = 32\nprior_hidden = 8\n")
    assert main(["train", "--data", str(d / "gen/series.csv"), "--mask", str(d / "mask/mask.csv"),
                 "--variant", "mnar", "--config", str(d / "train.cfg"), "--out", str(d / "model")]) == 0
    return d


def test_generate_outputs_and_manifest(workdir):
    x = read_series_csv(workdir / "gen/series.csv")
    z = read_series_csv(workdir / "gen/latents.csv")
    assert x.shape == z.shape == (120, 5, 3)
    man = json.loads((workdir / "gen/manifest.json").read_text())
    assert man["seed"] == 3 and man["command"] == "generate"


def test_generate_checksums_deterministic(workdir, tmp_path):
    assert main(["generate", "--batch", "120", "--seed", "3", "--out", str(tmp_path)]) == 0
    a = json.loads((workdir / "gen/manifest.json").read_text())["checksums"]
    b = json.loads((tmp_path / "manifest.json").read_text())["checksums"]
    assert list(a.values()) == list(b.values())


def test_mask_records_achieved_rate(workdir):
    r = read_series_csv(workdir / "mask/mask.csv", integer=True)
    man = json.loads((workdir / "mask/manifest.json").read_text())
    assert man["extra"]["achieved_rate"] == pytest.approx(1 - r.mean())
    assert abs(man["extra"]["achieved_rate"] - 0.3) < 0.01
    assert read_series_csv(workdir / "mask/c_truth.csv").shape == r.shape


def test_train_outputs(workdir):
    rows = read_rows(workdir / "model/history.csv")
    assert {r["split"] for r in rows} == {"train", "val"} and len(rows) == 4
    ck = json.loads((workdir / "model/checkpoint.json").read_text())
    assert ck["config"]["variant"] == "MNAR" and len(ck["extra"]["mean"]) == 3


def test_impute_keeps_observed_values(workdir):
    assert main(["impute", "--checkpoint", str(workdir / "model/checkpoint.json"),
                 "--data", str(workdir / "gen/series.csv"), "--mask", str(workdir / "mask/mask.csv"),
                 "--out", str(workdir / "imp")]) == 0
    x = read_series_csv(workdir / "gen/series.csv")
    r = read_series_csv(workdir / "mask/mask.csv", integer=True)
    out = read_series_csv(workdir / "imp/imputed.csv")
    np.testing.assert_array_equal(out[r > 0], x[r > 0])
    assert np.all(np.isfinite(out))


def test_evaluate_prints_one_row(workdir, capsys):
    assert main(["evaluate", "--checkpoint", str(workdir / "model/checkpoint.json"),
                 "--data", str(workdir / "gen/series.csv"), "--mask", str(workdir / "mask/mask.csv"),
                 "--latents", str(workdir / "gen/latents.csv"), "--c-truth", str(workdir / "mask/c_truth.csv"),
                 "--mechanism", "mnar", "--out", str(workdir / "eval")]) == 0
    header, line = capsys.readouterr().out.strip().splitlines()
    row = dict(zip(header.split(","), line.split(",")))
    assert row["variant"] == "MNAR" and float(row["mse"]) >= 0 and 0 <= float(row["mcc_z"]) <= 1
    assert read_rows(workdir / "eval/metrics.csv")[0]["variant"] == "MNAR"


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main(["mask", "--data", "nope.csv", "--mechanism", "mar", "--rate", "0.2", "--out", str(tmp_path)]) == 1
    assert main(["train", "--data", "x"]) == 1
    assert main(["mask", "--data", "x", "--mechanism", "sometimes", "--rate", "0.2"]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exits_1(workdir, tmp_path):
    (tmp_path / "bad.cfg").write_text("epoch = 2\n")
    assert main(["train", "--data", str(workdir / "gen/series.csv"), "--mask", str(workdir / "mask/mask.csv"),
                 "--variant", "mar", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exits_2(workdir, tmp_path):
    (tmp_path / "hot.cfg").write_text("epochs = 2\nlr = 1e300\nprior_hidden = 8\n")
    assert main(["train", "--data", str(workdir / "gen/series.csv"), "--mask", str(workdir / "mask/mask.csv"),
                 "--variant", "mar", "--config", str(tmp_path / "hot.cfg"), "--out", str(tmp_path)]) == 2


def test_sweep_without_cells_exits_1(tmp_path):
    (tmp_path / "empty.cfg").write_text("epochs = 1\n")
    assert main(["sweep", "--config", str(tmp_path / "empty.cfg"), "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--out", str(tmp_path)]) == 1


def test_sweep_tiny_grid(tmp_path, monkeypatch):
    monkeypatch.setenv("DMM_THREADS", "1")
    (tmp_path / "s.cfg").write_text(
        "mechanisms = mar\nratios = 0.2\nvariants = mar\nseeds = 0\nepochs = 1\nn_train = 64\nn_val = 32\nprior_hidden = 8\n"
    )
    assert main(["sweep", "--config", str(tmp_path / "s.cfg"), "--out", str(tmp_path)]) == 0
    (cell,) = read_rows(tmp_path / "cells.csv")
    assert cell["error"] == "" and float(cell["mse"]) > 0
    assert read_rows(tmp_path / "summary.csv")[0]["n_ok"] == "1"


def test_window_command(tmp_path):
    (tmp_path / "long.csv").write_text("date,v\n" + "".join(f"d{k},{k}\n" for k in range(50)))
    assert main(["window", "--data", str(tmp_path / "long.csv"), "--T", "10", "--out", str(tmp_path)]) == 0
    w = read_series_csv(tmp_path / "series.csv")
    assert w.shape == (5, 10, 1) and w[1, 0, 0] == 10


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    assert "6/6 checks passed" in capsys.readouterr().out


def test_selftest_catches_broken_backward(monkeypatch):
    def bad_exp(self):
        out = np.exp(self.data)
        return numcore.Tensor._make(out, (self,), "exp", lambda g: ((self, 1.1 * g * out),))

    monkeypatch.setattr(numcore.Tensor, "exp", bad_exp)
    results = dict((name, ok) for name, ok, _ in run_selftest())
    assert not all(results.values())
