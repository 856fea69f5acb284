import hashlib
import json
import math
import os

import numpy as np
import pytest
from scipy import stats

from funcprior import baselines as bl
from funcprior import pipeline as pl

TINY = {"gan_steps": 10, "log_every": 5, "n_samples": 20, "burn_in": 20, "n_samples_train": 64}


def file_hashes(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for f in files:
            p = os.path.join(root, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, directory)] = hashlib.sha256(fh.read()).hexdigest()
    return out


# --- configuration ----------------------------------------------------------


def test_config_rejects_unknown_experiment():
    with pytest.raises(pl.ValidationError):
        pl.ExperimentConfig("heat-equation")


def test_config_rejects_unknown_stage_and_preset():
    with pytest.raises(pl.ValidationError):
        pl.ExperimentConfig("dr-forward", stage="train")
    with pytest.raises(pl.ValidationError):
        pl.ExperimentConfig("dr-forward", preset="huge")


def test_config_rejects_bad_seed_and_override():
    with pytest.raises(pl.ValidationError):
        pl.ExperimentConfig("dr-forward", seed=-1)
    with pytest.raises(pl.ValidationError):
        pl.ExperimentConfig("dr-forward", overrides={"gan_stepz": 5})


def test_paper_preset_budgets():
    s = pl.ExperimentConfig("gp-appendixB", preset="paper").settings()
    assert s["gan_steps"] == 500_000 and s["gan_lambda"] == 0.1 and s["gan_ratio"] == 5
    assert pl.ExperimentConfig("darcy", preset="paper").settings()["n_samples_train"] == 30_000
    assert pl.ExperimentConfig("darcy").settings()["n_samples_train"] == 2000


def test_digest_tracks_settings():
    a = pl.ExperimentConfig("dr-forward")
    b = pl.ExperimentConfig("dr-forward", overrides={"gan_steps": 7})
    assert a.digest() == pl.ExperimentConfig("dr-forward").digest()
    assert a.digest() != b.digest()


def test_derive_seed_stable_and_distinct():
    assert pl.derive_seed(3, "gan") == pl.derive_seed(3, "gan")
    assert pl.derive_seed(3, "gan") != pl.derive_seed(3, "data")
    assert 0 <= pl.derive_seed(2**63, "x") < 2**32


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "darcy", "seed": 4}))
    assert pl.load_config(p)["seed"] == 4
    p.write_text(json.dumps({"experiment": "darcy", "colour": "red"}))
    with pytest.raises(pl.ValidationError):
        pl.load_config(p)
    with pytest.raises(pl.ValidationError):
        pl.load_config(tmp_path / "missing.json")


def test_stage_not_offered(tmp_path):
    with pytest.raises(pl.ValidationError):
        pl.run(pl.ExperimentConfig("zigzag-appendixC", stage="train-prior", out=str(tmp_path)))
    assert not any(tmp_path.iterdir())


def test_missing_prerequisite(tmp_path):
    cfg = pl.ExperimentConfig("dr-forward", stage="posterior", out=str(tmp_path), overrides=TINY)
    with pytest.raises(pl.MissingArtifact):
        pl.run(cfg)


# --- determinism and end-to-end ---------------------------------------------


@pytest.mark.parametrize("experiment", ["dr-forward", "darcy", "riser-window", "sine-meta"])
def test_gen_data_deterministic(tmp_path, experiment):
    over = {"n_samples_train": 64} if experiment in ("dr-forward", "darcy") else {}
    if experiment == "sine-meta":
        over = {"n_tasks": 64}
    if experiment == "riser-window":
        over = {"duration": 20.0}
    for name in ("a", "b"):
        pl.run(pl.ExperimentConfig(experiment, "gen-data", seed=11, out=str(tmp_path / name), overrides=over))
    ha = file_hashes(tmp_path / "a" / experiment / "data")
    hb = file_hashes(tmp_path / "b" / experiment / "data")
    assert ha and ha == hb


def test_gen_data_depends_on_seed(tmp_path):
    for name, seed in (("a", 1), ("b", 2)):
        pl.run(pl.ExperimentConfig("dr-forward", "gen-data", seed=seed, out=str(tmp_path / name),
                                   overrides={"n_samples_train": 16}))
    assert file_hashes(tmp_path / "a") != file_hashes(tmp_path / "b")


def test_tiny_forward_run_end_to_end(tmp_path):
    cfg = pl.ExperimentConfig("dr-forward", out=str(tmp_path), overrides=TINY)
    m = pl.run(cfg)
    for key in ("f_coverage_2", "u_coverage_2"):
        assert 0.0 <= m.metrics[key] <= 1.0
    d = tmp_path / "dr-forward"
    assert (d / "metrics.csv").exists() and (d / "manifest.json").exists()
    svgs = [f for f in file_hashes(d) if f.endswith(".svg")]
    csvs = [f for f in file_hashes(d) if f.endswith(".csv")]
    assert svgs and len(csvs) > len(svgs) - 1
    again = pl.RunManifest.load(d)
    assert again.metrics == m.metrics and again.config_hash == cfg.digest()


def test_metrics_bitwise_reproducible(tmp_path):
    over = dict(TINY, gan_steps=20)
    for name in ("a", "b"):
        pl.run(pl.ExperimentConfig("gp-appendixB", out=str(tmp_path / name),
                                   overrides=dict(over, cov_samples=1000, gpr_restarts=1)))
    a = (tmp_path / "a" / "gp-appendixB" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "gp-appendixB" / "metrics.csv").read_bytes()
    assert a == b


# --- zigzag diagnostic ------------------------------------------------------


def test_zigzag_x_marginal_is_uniform():
    xy = pl.zigzag_sample(7, 100_000, seed=0)
    d = stats.kstest(xy[:, 0], "uniform").statistic
    # asymptotic 1% critical value of the KS statistic
    assert d < 1.63 / math.sqrt(xy.shape[0])


def test_zigzag_points_on_graph():
    xy = pl.zigzag_sample(3, 1000, seed=1)
    # arccos(cos(t)) / pi is the distance from t / pi to the nearest even integer
    t = 3 * xy[:, 0]
    np.testing.assert_allclose(xy[:, 1], np.abs(t - 2 * np.round(t / 2)), atol=1e-12)


def test_zigzag_rejects_zero():
    with pytest.raises(ValueError):
        pl.zigzag_sample(0, 10)


def test_zigzag_w1_small_for_large_n():
    xy = pl.zigzag_sample(50, 100_000, seed=2)
    assert pl._w1_to_uniform(xy[:, 1]) < 0.02


def test_zigzag_conditional_spread():
    rep = pl.zigzag_demo((2, 20), samples=100_000, seed=0)
    assert abs(rep["target_conditional_std"] - 1 / math.sqrt(12)) < 0.01
    for r in rep["rows"]:
        assert r["conditional_std"] < 0.05


def test_sliced_w1_decreases():
    vals = [pl._sliced_w1_uniform(n) for n in (2, 5, 20, 50)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_wasserstein_1d():
    assert pl.wasserstein_1d([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert pl.wasserstein_1d([3.0, 1.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
    with pytest.raises(ValueError):
        pl.wasserstein_1d([0.0], [0.0, 1.0])


# --- generator comparison ---------------------------------------------------


def test_compare_generators_identical_rows():
    row = {"variant": "GenI", "method": "nuts", "covariance_mse": 0.01, "coverage_2": 0.9,
           "mean_std": 0.1, "accept_rate": 0.6, "seconds": 1.0}
    t = pl.compare_generators([row, dict(row)])
    assert t[0] == t[1]


def test_compare_generators_gpr_row_and_flag():
    x = np.linspace(-1, 1, 5)
    gpr = bl.gpr_fit(x, np.sin(x), optimize_hyper=False, lengthscale=0.2, noise_var=1e-4)
    xe = np.linspace(-1, 1, 41)
    ref = float(np.mean(bl.gpr_predict(gpr, xe)[1]))
    rows = [{"variant": "GenI", "method": "nuts", "covariance_mse": 0.01, "coverage_2": 0.9,
             "mean_std": ref, "accept_rate": 0.6, "seconds": 1.0},
            {"variant": "GenII", "method": "hmc", "covariance_mse": 0.01, "coverage_2": 0.3,
             "mean_std": 0.1 * ref, "accept_rate": 0.6, "seconds": 1.0}]
    t = pl.compare_generators(rows, gpr, xe)
    assert [r["underestimates_uncertainty"] for r in t] == [False, True, False]
    assert t[-1]["variant"] == "GPR" and t[-1]["mean_std"] == pytest.approx(ref)
