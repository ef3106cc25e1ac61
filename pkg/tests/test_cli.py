import csv
import json

import pytest

from triaxbnn import cli

TINY = {
    "simulate": {"suite": "cyclic", "drainage": "undrained", "n_cycles": 1, "steps_per_branch": 3},
    "split": {"by": "e0", "val": [0.6], "test": [0.575, 0.95]},
    "model": {"kind": "rbnn"},
    "train": {"hidden": [8], "H": 4, "lr": 0.003, "epochs": 4, "batch_size": 32, "n_q": 1,
              "kl_weight": "per_window", "seed": 0},
    "predict": {"n_mc": 5},
    "sweep": {"H": [1, 3, 5], "epochs": 2, "n_mc": 3},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.json").write_text(json.dumps(TINY))
    assert run("simulate", "--config", d / "tiny.json", "--out-dir", d) == 0
    return d


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config handling ----------------------------------------------------------------

def test_shipped_configs_validate():
    names = cli.shipped_configs()
    assert {"cyclic_cu.json", "cyclic_cd.json", "monotonic_sim.json"} <= set(names)
    for n in names:
        cli.load_config(n)


def test_malformed_json_reports_location(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{\n  "train": {"H": 3,}\n}')
    assert run("train", "--config", tmp_path / "bad.json", "--out-dir", tmp_path) == 2
    assert "bad.json:2:" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [{"trian": {}}, {"train": {"H": 0}}, {"train": {"kl_weight": "x"}},
                                 {"simulate": {"params": {"G0": -1.0}}}])
def test_invalid_config_exits_2(tmp_path, cfg):
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", tmp_path / "c.json", "--out-dir", tmp_path) == 2


def test_missing_dataset_exits_2(tmp_path):
    assert run("train", "--dataset", tmp_path / "nope.csv", "--out-dir", tmp_path) == 2


def test_unknown_config_name_exits_2(tmp_path):
    assert run("simulate", "--config", "no_such_config", "--out-dir", tmp_path) == 2


# -- simulate ---------------------------------------------------------------------

def test_simulate_writes_dataset_and_manifest(workdir):
    man = json.loads((workdir / "dataset.manifest.json").read_text())
    assert man["n_series"] == 16 and man["failures"] == {}
    assert man["sha256"] == cli.sha256(workdir / "dataset.csv")


def test_simulate_is_byte_reproducible(workdir, tmp_path):
    assert run("simulate", "--config", workdir / "tiny.json", "--out-dir", tmp_path) == 0
    assert (tmp_path / "dataset.csv").read_bytes() == (workdir / "dataset.csv").read_bytes()


def test_strict_simulation_failure_exits_1(tmp_path):
    path = {"kind": "monotonic", "amplitude": 0.01, "steps_per_branch": 5}
    # at 30 MPa the critical void ratio turns negative, so that series fails
    cfg = {"simulate": {"suite": "explicit", "series": [
        {"test_id": "ok", "drainage": "drained", "sigma3": 100.0, "e0": 0.7, "path": path},
        {"test_id": "bad", "drainage": "drained", "sigma3": 30000.0, "e0": 0.7, "path": path}]}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", tmp_path / "c.json", "--out-dir", tmp_path, "--strict") == 1
    assert run("simulate", "--config", tmp_path / "c.json", "--out-dir", tmp_path) == 0
    assert len({r["test_id"] for r in read_csv(tmp_path / "dataset.csv")}) == 1


# -- train / predict / evaluate ------------------------------------------------------

@pytest.fixture(scope="module")
def rbnn_run(workdir):
    out = workdir / "rbnn"
    assert run("train", "--config", workdir / "tiny.json", "--dataset", workdir / "dataset.csv",
               "--out-dir", out) == 0
    return out


def test_rbnn_history_and_checkpoint(rbnn_run):
    hist = read_csv(rbnn_run / "history.csv")
    assert len(hist) == 4
    assert {"neg_elbo", "train_nll", "val_nll", "kl"} <= set(hist[0])
    assert float(hist[-1]["neg_elbo"]) < float(hist[0]["neg_elbo"])
    ck = json.loads((rbnn_run / "checkpoint.json").read_text())
    assert ck["model"] == "rbnn" and len(ck["mu_q"]) == len(ck["sigma_raw"])


def test_rbnn_predictions_are_reproducible(workdir, rbnn_run):
    outs = []
    for name in ("a.csv", "b.csv"):
        assert run("predict", "--config", workdir / "tiny.json", "--checkpoint",
                   rbnn_run / "checkpoint.json", "--nmc", 1, "--seed", 3,
                   "--output", rbnn_run / name) == 0
        outs.append((rbnn_run / name).read_bytes())
    assert outs[0] == outs[1]
    rows = read_csv(rbnn_run / "a.csv")
    assert list(rows[0]) == list(cli.PRED_PROB_COLUMNS)
    assert {r["test_id"] for r in rows} == {"CU-e0.575", "CU-e0.950"}


def test_threads_do_not_change_predictions(workdir, rbnn_run, monkeypatch):
    args = ["predict", "--config", workdir / "tiny.json", "--checkpoint", rbnn_run / "checkpoint.json",
            "--nmc", 600]
    assert run(*args, "--output", rbnn_run / "t1.csv") == 0
    monkeypatch.setenv("RBNN_THREADS", "4")
    assert run(*args, "--output", rbnn_run / "t4.csv") == 0
    assert (rbnn_run / "t1.csv").read_bytes() == (rbnn_run / "t4.csv").read_bytes()


def test_evaluate_probabilistic(workdir, rbnn_run):
    assert run("predict", "--config", workdir / "tiny.json", "--checkpoint",
               rbnn_run / "checkpoint.json", "--out-dir", rbnn_run) == 0
    assert run("evaluate", "--out-dir", rbnn_run) == 0
    metrics = json.loads((rbnn_run / "metrics.json").read_text())
    assert {"physical", "normalized"} <= set(metrics)
    assert "coverage95" in read_csv(rbnn_run / "metrics.csv")[0]


def test_ffnn_equals_unit_window_rffnn(workdir):
    a, b = workdir / "ffnn", workdir / "rffnn1"
    common = ["--config", workdir / "tiny.json", "--dataset", workdir / "dataset.csv", "--epochs", 3]
    assert run("train", *common, "--model", "ffnn", "--out-dir", a) == 0
    assert run("train", *common, "--model", "rffnn", "--H", 1, "--out-dir", b) == 0
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()


def test_deterministic_predictions_and_self_evaluation(workdir, tmp_path):
    out = workdir / "ffnn"
    if not (out / "checkpoint.json").exists():
        pytest.skip("ffnn checkpoint not built")
    assert run("predict", "--checkpoint", out / "checkpoint.json", "--out-dir", out) == 0
    rows = read_csv(out / "predictions.csv")
    assert list(rows[0]) == list(cli.PRED_COLUMNS)
    # a dataset whose states equal the predictions evaluates to zero error
    data = read_csv(workdir / "dataset.csv")
    pred = {(r["test_id"], int(r["step"]), r["channel"]): r["mean"] for r in rows}
    for r in data:
        t = int(r["step"])
        if (r["test_id"], t, "p") in pred:
            r["p_kpa"] = pred[(r["test_id"], t, "p")]
            r["q_kpa"] = pred[(r["test_id"], t, "q")]
            r["third_value"] = pred[(r["test_id"], t, r["third_kind"])]
    with open(tmp_path / "self.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(data[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(data)
    assert run("evaluate", "--predictions", out / "predictions.csv", "--dataset", tmp_path / "self.csv",
               "--out-dir", tmp_path) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())["physical"]
    assert max(m["mae"]) < 1e-9 and max(m["rmse"]) < 1e-9
    assert "coverage95" not in read_csv(tmp_path / "metrics.csv")[0]


def test_norm_stats_mismatch_exits_4(workdir, tmp_path):
    cfg = dict(TINY, simulate=dict(TINY["simulate"], params={"G0": 2500.0}))
    (tmp_path / "other.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", tmp_path / "other.json", "--out-dir", tmp_path) == 0
    assert run("predict", "--checkpoint", workdir / "rbnn" / "checkpoint.json", "--dataset",
               tmp_path / "dataset.csv", "--nmc", 2, "--out-dir", tmp_path) == 4


def test_misaligned_ids_exit_4(workdir, rbnn_run, tmp_path):
    assert run("predict", "--checkpoint", rbnn_run / "checkpoint.json", "--nmc", 2,
               "--test-ids", "CU-e0.999", "--out-dir", tmp_path) == 4
    text = (rbnn_run / "predictions.csv").read_text().replace("CU-e0.575", "CU-e0.123")
    (tmp_path / "p.csv").write_text(text)
    assert run("evaluate", "--predictions", tmp_path / "p.csv", "--dataset", workdir / "dataset.csv",
               "--out-dir", tmp_path) == 4


def test_divergence_exits_3_and_keeps_history(workdir, tmp_path):
    cfg = dict(TINY, model={"kind": "rffnn"}, train=dict(TINY["train"], lr=1e300, epochs=30))
    (tmp_path / "wild.json").write_text(json.dumps(cfg))
    code = run("train", "--config", tmp_path / "wild.json", "--dataset", workdir / "dataset.csv",
               "--out-dir", tmp_path)
    assert code == 3
    assert (tmp_path / "history.csv").exists() and not (tmp_path / "checkpoint.json").exists()


# -- sweep ------------------------------------------------------------------------

def test_sweep_one_row_per_H(workdir):
    out = workdir / "sweep"
    assert run("sweep", "--config", workdir / "tiny.json", "--dataset", workdir / "dataset.csv",
               "--model", "rffnn", "--out-dir", out) == 0
    rows = read_csv(out / "sweep.csv")
    assert [int(r["H"]) for r in rows] == [1, 3, 5]
    assert json.loads((out / "sweep.manifest.json").read_text())["chosen_H"] in (1, 3, 5)


def test_monotonic_sweep_emits_three_rows(tmp_path):
    cfg = cli.load_config("monotonic_sim")
    cfg["simulate"].update(pressures=[5, 10, 20, 100, 640, 800], e0s=[0.7], steps=20)
    cfg["train"].update(hidden=[8], epochs=1)
    cfg["sweep"].update(epochs=1, n_mc=2)
    (tmp_path / "m.json").write_text(json.dumps(cfg))
    assert run("simulate", "--config", tmp_path / "m.json", "--out-dir", tmp_path) == 0
    assert run("sweep", "--config", tmp_path / "m.json", "--out-dir", tmp_path) == 0
    assert [int(r["H"]) for r in read_csv(tmp_path / "sweep.csv")] == [7, 10, 14]
