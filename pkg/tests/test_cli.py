import csv
import io

import numpy as np
import pytest

from couda.cli import RunConfig, UsageError, main, resolve
from couda.data import load_bundle
from couda.metrics import read_report
from couda.model import Architecture, build_model
from couda.training import save_checkpoint

SMALL = ["--per-class", "30", "--steps", "40", "--log-every", "10"]


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.csv"
    code, _ = run("gen-data", "--k", 3, "--rot", 30, "--noise", 0.2, "--seed", 7, "-o", path, "--per-class", 30)
    assert code == 0
    return path


def test_gen_data_round_trip_and_determinism(tmp_path, dataset):
    bundle = load_bundle(dataset)
    assert bundle.n_classes == 3 and bundle.seed == 7
    again = tmp_path / "again.csv"
    run("gen-data", "--k", 3, "--rot", 30, "--noise", 0.2, "--seed", 7, "-o", again, "--per-class", 30)
    assert again.read_bytes() == dataset.read_bytes()
    assert (tmp_path / "resolved_config.gen-data.txt").exists()


def test_gen_data_prints_summary(tmp_path):
    code, text = run("gen-data", "-o", tmp_path / "d.csv", "--per-class", 10, "--noise", 0.1)
    assert code == 0
    assert "K=3 n_s=30 n_t=30" in text and "0.9000 0.0500 0.0500" in text


def test_bad_noise_names_flag(tmp_path, capsys):
    code, _ = run("gen-data", "--noise", 1.5, "-o", tmp_path / "x.csv")
    assert code == 2
    assert "--noise" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_non_numeric_flag_is_usage_error(capsys):
    assert run("gen-data", "--steps", "many")[0] == 2
    assert "--steps" in capsys.readouterr().err


def test_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nalpha = 0.3\nseed = 5\neta=0.02\n")
    env = {"COUDA_SEED": "9"}
    assert resolve({}, env=env).seed == 9
    rc = resolve({"eta": 0.05}, str(cfg), env=env)
    assert (rc.alpha, rc.seed, rc.eta) == (0.3, 5, 0.05)
    assert resolve({}, env={}) == RunConfig()


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("alpha = 0.3\nbogus = 1\n")
    with pytest.raises(UsageError, match=":2:"):
        resolve({}, str(cfg), env={})


def test_train_eval_and_echo(tmp_path, dataset):
    out_dir = tmp_path / "run"
    code, _ = run("train", "--dataset", dataset, "--out-dir", out_dir, "--ensemble", "maximum", *SMALL)
    assert code == 0
    echo = (out_dir / "resolved_config.train.txt").read_text()
    assert "ensemble = maximum" in echo
    assert (out_dir / "curves.csv").read_text().startswith("step,domain_loss")

    reports = []
    for name in ("a.csv", "b.csv"):
        code, _ = run("eval", "--dataset", dataset, "--checkpoint", out_dir / "model.ckpt", "--report", out_dir / name)
        assert code == 0
        reports.append((out_dir / name).read_text())
    assert reports[0] == reports[1]
    fields = {line.split(",")[0] for line in reports[0].splitlines()}
    assert {"accuracy", "macro_precision", "macro_recall", "macro_f1", "q_error_maxabs", "q_error_frobenius"} <= fields
    assert "Q_est" in fields and "Q_true" in fields


def test_echo_replays_the_run(tmp_path, dataset):
    first, second = tmp_path / "r1", tmp_path / "r2"
    run("train", "--dataset", dataset, "--out-dir", first, "--seed", 3, *SMALL)
    echo = first / "resolved_config.train.txt"
    replay = tmp_path / "replay.cfg"
    text = echo.read_text().replace(str(first), str(second))
    replay.write_text(text)
    assert run("train", "--config", replay)[0] == 0
    assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()


def test_source_only_variant_runs(tmp_path, dataset):
    code, _ = run("train", "--dataset", dataset, "--out-dir", tmp_path / "so", "--alpha", 0, "--eta", 0, *SMALL)
    assert code == 0


def test_uniform_model_is_at_chance(tmp_path):
    path = tmp_path / "bal.csv"
    run("gen-data", "-o", path, "--per-class", 300, "--noise", 0.0, "--seed", 2)
    model = build_model(Architecture(2, 3), seed=0)
    for peer in model.peers:
        for p in peer.classifier.weights + peer.classifier.biases:
            p.data = np.zeros(p.shape)
    save_checkpoint(model, tmp_path / "m.ckpt")
    code, _ = run("eval", "--dataset", path, "--checkpoint", tmp_path / "m.ckpt", "--report", tmp_path / "rep.csv")
    assert code == 0
    assert abs(read_report(tmp_path / "rep.csv")["accuracy"] - 1 / 3) <= 0.05


def test_eval_missing_files(tmp_path, dataset, capsys):
    assert run("eval", "--dataset", tmp_path / "none.csv", "--checkpoint", tmp_path / "m.ckpt")[0] == 2
    assert run("eval", "--dataset", dataset, "--checkpoint", tmp_path / "m.ckpt")[0] == 2
    assert "--checkpoint" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_exit_code(tmp_path, dataset, capsys):
    code, _ = run("train", "--dataset", dataset, "--out-dir", tmp_path / "r", "--learning-rate", "1e300", *SMALL)
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_ablate_single_cell_matches_train_eval(tmp_path, dataset):
    table = tmp_path / "abl.csv"
    code, _ = run("ablate", "--dataset", dataset, "-o", table, "--seeds", 4, *SMALL)
    assert code == 0
    rows = list(csv.DictReader(table.open()))
    assert len(rows) == 1 and rows[0]["variant"] == "grid"
    run("train", "--dataset", dataset, "--out-dir", tmp_path / "r", "--seed", 4, *SMALL)
    run("eval", "--dataset", dataset, "--checkpoint", tmp_path / "r" / "model.ckpt", "--report", tmp_path / "rep.csv")
    report = read_report(tmp_path / "rep.csv")
    assert float(rows[0]["accuracy"]) == report["accuracy"]
    assert float(rows[0]["q_error_maxabs"]) == report["q_error_maxabs"]


def test_ablate_components_and_grid(tmp_path, dataset):
    table = tmp_path / "abl.csv"
    code, _ = run(
        "ablate", "--dataset", dataset, "-o", table, "--seeds", "0,1",
        "--domain-losses", "least_squares,gan", "--components", "full,source_only,no_ncl", *SMALL,
    )
    assert code == 0
    rows = list(csv.DictReader(table.open()))
    assert len(rows) == (2 + 3) * 2
    assert {r["variant"] for r in rows} == {"grid", "full", "source_only", "no_ncl"}


def test_ablate_unknown_metric(dataset, capsys):
    assert run("ablate", "--dataset", dataset, "--diversity-metrics", "js,hellinger")[0] == 2
    err = capsys.readouterr().err
    assert "hellinger" in err and "js, kl, l1, l2, cos" in err


def test_ablate_empty_grid(dataset, capsys):
    assert run("ablate", "--dataset", dataset, "--ensembles", "")[0] == 2
    assert "empty" in capsys.readouterr().err


def test_inspect_noise_matrix(tmp_path, dataset):
    run("train", "--dataset", dataset, "--out-dir", tmp_path / "r", *SMALL)
    code, text = run("inspect-noise-matrix", "--dataset", dataset, "--checkpoint", tmp_path / "r" / "model.ckpt")
    assert code == 0
    assert "estimated_Q" in text and "true_Q" in text and "q_error maxabs=" in text
    est = np.array([[float(v) for v in line.split()] for line in text.splitlines()[1:4]])
    np.testing.assert_allclose(est.sum(axis=1), 1.0, atol=2e-4)
