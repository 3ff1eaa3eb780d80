import numpy as np
import pytest
from scipy.stats import spearmanr

from ordgam.likelihood import logistic_cdf
from ordgam.simulate import SimConfig, draw_scores, paper_like_config, simulate

from conftest import small_config


def test_latent_draw_frequencies():
    rng = np.random.default_rng(0)
    n = 10 ** 6
    y = draw_scores(np.zeros(n), (-1.0, 0.0, 1.0), rng)
    freq = np.bincount(y, minlength=4) / n
    F = logistic_cdf(np.array([-1.0, 0.0, 1.0]))
    expected = np.diff(np.r_[0.0, F, 1.0])
    np.testing.assert_allclose(expected, [0.2689, 0.2311, 0.2311, 0.2689], atol=1e-4)
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(freq - expected) <= 4 * se)
    np.testing.assert_allclose(freq, expected, atol=0.002)


def test_large_shift_top_category():
    y = draw_scores(np.full(10000, 10.0), (-1.0, 0.0, 1.0), np.random.default_rng(1))
    assert np.mean(y == 3) >= 0.99


def test_null_config_matches_closed_form():
    cfg = small_config(sigma_b=0.0, intercept=0.0, study_effect=0.0,
                       site_effects={}, f_grid_y=(0.0,) * 161, cutpoints=(-1.0, 0.0, 1.0),
                       n_patients=400)
    d, _ = simulate(cfg)
    freq = d.counts() / len(d)
    expected = np.diff(np.r_[0.0, logistic_cdf(np.array([-1.0, 0.0, 1.0])), 1.0])
    se = np.sqrt(expected * (1 - expected) / len(d))
    assert np.all(np.abs(freq - expected) <= 4 * se)


def test_deterministic():
    a, ta = simulate(small_config(seed=5))
    b, tb = simulate(small_config(seed=5))
    assert a.frame.equals(b.frame)
    assert ta == tb
    c, _ = simulate(small_config(seed=6))
    assert not a.frame.equals(c.frame)


def test_patient_substreams_independent_of_cohort_size():
    a, _ = simulate(small_config(n_patients=5))
    b, _ = simulate(small_config(n_patients=9))
    first = a.frame[a.frame["patient"] == "P1"].reset_index(drop=True)
    same = b.frame[b.frame["patient"] == "P1"].reset_index(drop=True)
    assert first.equals(same)


def test_truth_sidecar():
    cfg = small_config()
    d, truth = simulate(cfg)
    assert set(truth["random_intercepts"]) == set(d.patients)
    assert len(truth["eta"]) == len(d)
    assert SimConfig.from_dict(truth["config"]) == cfg


def test_dose_invariants():
    d, _ = simulate(small_config())
    f = d.frame
    np.testing.assert_array_equal(f["cumdos_site"], f["cumdose"] * f["perc"] / 100.0)
    for _, g in f.groupby("patient"):
        assert np.all(np.diff(g.sort_values(["eval"])["cumdose"].to_numpy()) >= 0)


def test_paper_like_shape():
    cfg = paper_like_config()
    assert cfg.n_patients == 75 and len(cfg.sites) == 8 and cfg.fraction_dose == 2.0
    d, _ = simulate(cfg)
    assert 7200 <= len(d) <= 7400 * 1.02
    assert 60.0 <= d.frame["cumdose"].max() <= 70.0
    evals = d.frame.groupby("patient")["eval"].max()
    assert 11.0 <= evals.mean() <= 13.5


def test_within_patient_correlation():
    cfg = small_config(n_patients=200, site_effects={}, f_grid_y=(0.0,) * 161, sigma_b=1.5,
                       study_effect=0.0)
    d, _ = simulate(cfg)
    rng = np.random.default_rng(0)
    f = d.frame.reset_index(drop=True)
    groups = [g.index.to_numpy() for _, g in f.groupby("patient")]
    within = np.array([rng.choice(g, 2, replace=False) for g in groups for _ in range(20)])
    between = rng.choice(len(f), size=(within.shape[0], 2))
    y = f["score"].to_numpy()
    r_w = spearmanr(y[within[:, 0]], y[within[:, 1]])[0]
    r_b = spearmanr(y[between[:, 0]], y[between[:, 1]])[0]
    assert r_w > r_b + 0.1


@pytest.mark.parametrize("kw", [dict(n_patients=0), dict(sites=()), dict(sigma_b=-1.0),
                                dict(cutpoints=(0.0, 1.0)), dict(cutpoints=(-1.0, -2.0))])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        small_config(**kw)


def test_config_json_round_trip(tmp_path):
    cfg = paper_like_config(3)
    p = tmp_path / "cfg.json"
    import json
    p.write_text(json.dumps(cfg.to_dict()))
    assert SimConfig.from_json(p) == cfg
