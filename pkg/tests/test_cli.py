import json

import numpy as np
import pandas as pd
import pytest

from ordgam.cli import main
from ordgam.data import write_csv
from ordgam.exceptions import ConvergenceError
from ordgam.simulate import paper_like_config, simulate

from conftest import small_config

SPEC = {"label": "small", "linear": ["study", "site"], "smooth": [{"term": "cumdos_site", "k": 6}],
        "random_intercept": "patient", "reference": {"site": "a", "study": "0"}}


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    d, _ = simulate(small_config(n_patients=16))
    write_csv(d, root / "d.csv")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "schema.json").write_text(json.dumps({"levels": {"site": ["a", "b", "c", "d"]}}))
    return root


@pytest.fixture(scope="module")
def fitted(files):
    out = files / "run1"
    code = main(["fit", "--data", str(files / "d.csv"), "--schema", str(files / "schema.json"),
                 "--spec", str(files / "spec.json"), "--out", str(out), "--covariance"])
    assert code == 0
    return out


def test_fit_outputs(fitted):
    names = sorted(p.name for p in fitted.iterdir())
    assert names == ["fit.json", "manifest.json", "or_table.csv", "residuals.csv", "smooth_grid.csv"]
    obj = json.loads((fitted / "fit.json").read_text())
    assert {"coefficients", "cutpoints", "rho", "sigma_b", "edf", "loglik"} <= set(obj)
    grid = pd.read_csv(fitted / "smooth_grid.csv")
    assert list(grid.columns) == ["term", "by_level", "x", "fit", "se"]
    assert len(grid) == 200
    orr = pd.read_csv(fitted / "or_table.csv")
    assert set(orr["term"]) == {"study", "site"}
    man = json.loads((fitted / "manifest.json").read_text())
    assert man["command"] == "fit"
    assert len(man["inputs"]) == 3
    assert all(len(h) == 64 for h in man["inputs"].values())


def test_rerun_from_manifest_byte_identical(fitted, tmp_path):
    man = json.loads((fitted / "manifest.json").read_text())
    argv = list(man["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path / "again")
    assert main(argv) == 0
    for name in ("fit.json", "or_table.csv", "smooth_grid.csv", "residuals.csv"):
        assert (fitted / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
    man2 = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert man2["config_hash"] == man["config_hash"]
    assert man2["inputs"] == man["inputs"]


def test_predict(files, fitted, tmp_path):
    for mode in ("population", "conditional"):
        out = tmp_path / mode
        code = main(["predict", "--fit", str(fitted / "fit.json"), "--data", str(files / "d.csv"),
                     "--schema", str(files / "schema.json"), "--mode", mode, "--out", str(out)])
        assert code == 0
        df = pd.read_csv(out / "predictions.csv")
        p = df[["p0", "p1", "p2", "p3"]].to_numpy()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (tmp_path / "population" / "manifest.json").exists()
    code = main(["predict", "--fit", str(fitted / "fit.json"), "--data", str(files / "d.csv"),
                 "--marginal-ghq", "15", "--out", str(tmp_path / "m")])
    assert code == 0


def test_cv(files, tmp_path):
    code = main(["cv", "--data", str(files / "d.csv"), "--spec", str(files / "spec.json"),
                 "--folds", "2", "--seed", "3", "--out", str(tmp_path)])
    assert code == 0
    df = pd.read_csv(tmp_path / "cv.csv")
    assert list(df.columns) == ["label", "N", "folds", "seed", "RPE0", "RPE1", "RPE2", "RPE3"]


def test_diagnose(files, tmp_path):
    code = main(["diagnose", "--data", str(files / "d.csv"), "--spec", str(files / "spec.json"),
                 "--out", str(tmp_path)])
    assert code == 0
    po = pd.read_csv(tmp_path / "po_diagnostic.csv")
    assert set(po["r"]) == {-1, 0, 1, 2}
    assert (tmp_path / "residuals.csv").exists() and (tmp_path / "manifest.json").exists()


def test_merge_top(files, tmp_path):
    code = main(["diagnose", "--data", str(files / "d.csv"), "--spec", str(files / "spec.json"),
                 "--merge-top", "2", "--out", str(tmp_path)])
    assert code == 0
    assert set(pd.read_csv(tmp_path / "residuals.csv")["score"]) <= {0, 1, 2}


def test_compare_four_models(tmp_path):
    cfg = paper_like_config(1)
    d, _ = simulate(type(cfg).from_dict(dict(cfg.to_dict(), n_patients=20)))
    write_csv(d, tmp_path / "d.csv")
    specs = [f"docs/specs/{name}.json" for name in ("linear", "best", "reduced", "full")]
    code = main(["compare", "--data", str(tmp_path / "d.csv"), "--specs", *specs, "--no-cv",
                 "--out", str(tmp_path / "cmp")])
    assert code == 0
    df = pd.read_csv(tmp_path / "cmp" / "comparison.csv")
    assert len(df) == 4
    assert list(df.columns)[:9] == ["label", "N", "edf", "AIC", "BIC", "RPE0", "RPE1", "RPE2", "RPE3"]
    assert list(df["label"]) == ["linear", "best", "reduced", "full"]


def test_simulate_command(tmp_path):
    cfg = small_config(n_patients=3).to_dict()
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    out = tmp_path / "sim" / "data.csv"
    code = main(["simulate", "--config", str(tmp_path / "cfg.json"), "--out", str(out),
                 "--truth", str(tmp_path / "sim" / "truth.json"), "--seed", "4"])
    assert code == 0
    first = out.read_bytes()
    assert (tmp_path / "sim" / "manifest.json").exists()
    truth = json.loads((tmp_path / "sim" / "truth.json").read_text())
    assert truth["config"]["seed"] == 4
    main(["simulate", "--config", str(tmp_path / "cfg.json"), "--out", str(out), "--seed", "4"])
    assert out.read_bytes() == first


def test_bed_command(tmp_path, capsys):
    sched = tmp_path / "s.csv"
    sched.write_text("day,dose\n0,2\n1,2\n2,2\n")
    assert main(["bed", "--schedule", str(sched)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "fraction,day,cumdose,bed"
    assert [float(v) for v in lines[-1].split(",")] == [3, 2, 6, pytest.approx(7.2, abs=1e-12)]
    assert main(["bed", "--schedule", str(sched), "--alpha-beta", "3",
                 "--out", str(tmp_path / "b" / "bed.csv")]) == 0
    df = pd.read_csv(tmp_path / "b" / "bed.csv")
    assert df["bed"].iloc[0] == pytest.approx(2 * (1 + 2 / 3))


def test_unknown_flag_exits_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--bogus"])
    assert exc.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_validation_error_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("patient,eval,site,score,cumdos_site\n1,1,a,0,1\n1,1,a,2,1\n")
    (tmp_path / "spec.json").write_text(json.dumps({"linear": []}))
    code = main(["fit", "--data", str(bad), "--spec", str(tmp_path / "spec.json"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    err = capsys.readouterr().err
    assert "duplicate" in err and "Traceback" not in err


def test_missing_file_exit_1(tmp_path):
    code = main(["fit", "--data", str(tmp_path / "none.csv"), "--spec", str(tmp_path / "x.json"),
                 "--out", str(tmp_path / "o")])
    assert code == 1


def test_convergence_failure_exit_2(files, tmp_path, monkeypatch):
    import ordgam.cli as cli

    def boom(*a, **k):
        raise ConvergenceError("outer loop stalled", iterate=np.array([1.0, 2.0]),
                               trace=[{"iter": 1}])

    monkeypatch.setattr(cli, "fit", boom)
    code = main(["fit", "--data", str(files / "d.csv"), "--spec", str(files / "spec.json"),
                 "--out", str(tmp_path)])
    assert code == 2
    diag = json.loads((tmp_path / "convergence.json").read_text())
    assert diag["message"] == "outer loop stalled"
    assert diag["iterate"] == [1.0, 2.0]
    assert (tmp_path / "manifest.json").exists()
