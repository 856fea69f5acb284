import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcprior import inference as inf
from funcprior import nets
from funcprior.gan import DataPrior
from funcprior.stochastic import Block


def quad_grad(q):
    return np.asarray(q, dtype=np.float64)


def conjugate_target():
    # u = xi_1 observed once as 1 with unit noise: posterior N(0.5, 0.5)
    return inf.LatentTarget(inf.IdentityPrior(1), None, inf.observations("u", [0.0], [1.0], 1.0))


# --- likelihood -------------------------------------------------------------


def test_loglik_matched_observation():
    data = inf.observations("u", [0.3], [0.7], 0.05)
    ll = inf.log_likelihood(inf.IdentityPrior(1), None, np.array([0.7]), data)
    assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * 0.0025), abs=1e-12)
    assert ll == pytest.approx(2.07680, abs=1e-5)


def test_loglik_one_sigma_residual():
    m = inf.IdentityPrior(1)
    data = inf.observations("u", [0.3], [0.7], 0.05)
    a = inf.log_likelihood(m, None, np.array([0.7]), data)
    b = inf.log_likelihood(m, None, np.array([0.75]), data)
    assert b - a == pytest.approx(-0.5, abs=1e-12)


def test_loglik_empty():
    assert inf.log_likelihood(inf.IdentityPrior(1), None, np.array([3.0]), []) == 0.0


def test_loglik_unknown_variable():
    with pytest.raises(KeyError):
        inf.log_likelihood(inf.IdentityPrior(1), None, np.zeros(1), inf.observations("q", [0.0], [1.0], 0.1))


def test_observation_requires_positive_noise():
    with pytest.raises(ValueError):
        inf.Observation("u", (0.0,), 1.0, 0.0)


def test_log_posterior_prior_only():
    xi = np.array([0.3, -1.2, 2.0])
    assert inf.log_posterior(inf.IdentityPrior(3), None, xi, []) == pytest.approx(-0.5 * xi @ xi)
    assert inf.log_posterior(inf.IdentityPrior(3), None, np.zeros(3), []) == 0.0


def test_log_posterior_dimension_check():
    with pytest.raises(ValueError):
        inf.log_posterior(inf.IdentityPrior(2), None, np.zeros(3), [])


def test_conjugate_gradient_vanishes_at_mean():
    np.testing.assert_allclose(conjugate_target().grad(np.array([0.5])), 0.0, atol=1e-14)


def test_loglik_through_generator():
    g = nets.GenI.build(1, 3, 8, 1)
    p = {"u": g.init(jax.random.PRNGKey(0))}
    model = DataPrior(g, [Block("u", [0.0])])
    xi = np.array([0.4, -0.2, 1.1])
    x = np.array([-0.5, 0.25])
    pred = np.asarray(g(p["u"], jnp.asarray(x[:, None]), jnp.asarray(xi[None])))[0]
    data = inf.observations("u", x, pred + np.array([0.1, -0.2]), 0.1)
    expected = 2 * (-0.5 * math.log(2 * math.pi * 0.01)) - (1 + 4) / 2
    assert inf.log_likelihood(model, p, xi, data) == pytest.approx(expected, abs=1e-10)


# --- leapfrog ---------------------------------------------------------------


def test_leapfrog_hand_step():
    q, p, ok = inf.leapfrog([1.0], [0.0], 0.1, 1, quad_grad)
    assert ok
    assert q[0] == pytest.approx(0.995, abs=1e-15)
    assert p[0] == pytest.approx(-0.09975, abs=1e-15)
    dH = 0.5 * (q[0] ** 2 + p[0] ** 2) - 0.5
    # exact energy error of one step from (1, 0): -eps^4 / 8 + eps^6 / 32
    assert dH == pytest.approx(-1e-4 / 8 + 1e-6 / 32, abs=1e-15)
    assert abs(dH) == pytest.approx(1.3e-5, abs=1e-6)


def test_leapfrog_zero_steps():
    q, p, ok = inf.leapfrog([0.3, 0.4], [1.0, -2.0], 0.5, 0, quad_grad)
    np.testing.assert_array_equal(q, [0.3, 0.4])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_leapfrog_divergence_flag():
    _, _, ok = inf.leapfrog([1.0], [0.0], 0.1, 3, lambda q: np.array([np.nan]))
    assert not ok


def test_energy_error_second_order():
    # fixed integration time T = 1: the energy error scales as eps^2
    def err(eps):
        q, p, _ = inf.leapfrog([1.0], [0.0], eps, int(round(1 / eps)), quad_grad)
        return abs(0.5 * (q[0] ** 2 + p[0] ** 2) - 0.5)

    ratio = err(0.1) / err(0.05)
    assert 3 <= ratio <= 5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.3), st.integers(1, 20))
def test_leapfrog_reversible(seed, eps, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    A = A @ A.T + 0.5 * np.eye(2)
    q0, p0 = rng.normal(size=2), rng.normal(size=2)
    q1, p1, _ = inf.leapfrog(q0, p0, eps, n, lambda q: A @ q)
    q2, p2, _ = inf.leapfrog(q1, -p1, eps, n, lambda q: A @ q)
    np.testing.assert_allclose(q2, q0, atol=1e-12)
    np.testing.assert_allclose(-p2, p0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.3), st.integers(1, 10))
def test_leapfrog_volume_preserving(seed, eps, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(2, 2))
    A = A @ A.T + 0.5 * np.eye(2)

    def flow(z):
        q, p, _ = inf.leapfrog(z[:2], z[2:], eps, n, lambda q: A @ q)
        return np.concatenate([q, p])

    # the map is linear, so its columns on the unit vectors are the Jacobian
    J = np.column_stack([flow(e) for e in np.eye(4)])
    assert np.linalg.det(J) == pytest.approx(1.0, abs=1e-9)


# --- samplers ---------------------------------------------------------------


def check_standard_normal(draws):
    x = draws.samples
    for k in range(x.shape[1]):
        assert abs(x[:, k].mean()) < 3 / math.sqrt(inf.effective_sample_size(x[:, k]))
        assert abs(x[:, k].var() - 1.0) < 0.1


def check_conjugate(draws, var_tol=0.15):
    x = draws.samples[:, 0]
    assert abs(x.mean() - 0.5) < 3 * inf.mc_standard_error(x)
    assert abs(x.var() - 0.5) < var_tol * 0.5


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        inf.SamplerConfig(method="mala")
    with pytest.raises(ValueError):
        inf.SamplerConfig(target_accept=1.0)


def test_hmc_standard_gaussian():
    t = inf.LatentTarget(inf.IdentityPrior(2), None, [])
    draws = inf.sample_hmc(t, inf.SamplerConfig.hmc(n_samples=4000, burn_in=500, n_leapfrog=10, seed=1))
    check_standard_normal(draws)
    assert draws.n == 4000 and draws.method == "hmc"


def test_hmc_conjugate():
    draws = inf.sample_hmc(conjugate_target(), inf.SamplerConfig.hmc(n_samples=4000, burn_in=500, seed=2))
    check_conjugate(draws)


def test_hmc_tiny_step_accepts_everything():
    t = inf.LatentTarget(inf.IdentityPrior(2), None, [])
    draws = inf.sample_hmc(t, inf.SamplerConfig.hmc(n_samples=200, burn_in=0, step_size=1e-4, adapt=False,
                                                    n_leapfrog=5, seed=3))
    assert draws.accept_rate > 0.9999


def test_nuts_standard_gaussian():
    t = inf.LatentTarget(inf.IdentityPrior(2), None, [])
    draws = inf.sample_nuts(t, inf.SamplerConfig(n_samples=3000, burn_in=500, seed=4))
    check_standard_normal(draws)
    assert draws.meta["tree_sampling"] == "slice"


def test_nuts_conjugate_and_adaptation():
    draws = inf.sample_nuts(conjugate_target(), inf.SamplerConfig(n_samples=4000, burn_in=1000, seed=5))
    check_conjugate(draws)
    assert draws.step_size > 0
    assert abs(draws.accept_rate - 0.6) <= 0.1


def test_hmc_and_nuts_agree():
    a = inf.sample_hmc(conjugate_target(), inf.SamplerConfig.hmc(n_samples=4000, burn_in=500, seed=6)).samples[:, 0]
    b = inf.sample_nuts(conjugate_target(), inf.SamplerConfig(n_samples=4000, burn_in=500, seed=7)).samples[:, 0]
    joint = math.hypot(inf.mc_standard_error(a), inf.mc_standard_error(b))
    assert abs(a.mean() - b.mean()) < 3 * joint


def test_samplers_reproducible():
    cfg = inf.SamplerConfig(n_samples=50, burn_in=20, seed=9)
    a = inf.sample_nuts(conjugate_target(), cfg).samples
    b = inf.sample_nuts(conjugate_target(), cfg).samples
    np.testing.assert_array_equal(a, b)


def test_dual_averaging_moves_toward_target():
    da = inf.DualAveraging(1.0, 0.6)
    # persistent rejection shrinks the step
    for _ in range(20):
        eps = da.update(0.0)
    assert eps < 1.0
    da = inf.DualAveraging(1.0, 0.6)
    for _ in range(20):
        eps = da.update(1.0)
    assert eps > 1.0


def test_ess_of_iid_chain():
    x = np.random.default_rng(0).normal(size=5000)
    assert 4000 < inf.effective_sample_size(x) < 6500


def test_split_rhat_near_one():
    chains = np.random.default_rng(1).normal(size=(4, 1000, 2))
    assert np.all(np.abs(inf.split_rhat(chains) - 1) < 0.01)


# --- pushforward ------------------------------------------------------------


def test_pushforward_identical_draws():
    x = np.linspace(-1, 1, 5)
    res = inf.pushforward(inf.IdentityPrior(1), None, np.full((7, 1), 0.8), {"u": x})
    np.testing.assert_array_equal(res["u"]["std"], 0.0)
    np.testing.assert_allclose(res["u"]["mean"], 0.8)


def test_pushforward_symmetric_pair():
    res = inf.pushforward(inf.IdentityPrior(1), None, np.array([[1.0], [-1.0]]), {"u": [0.0, 0.5]})
    np.testing.assert_allclose(res["u"]["mean"], 0.0)
    np.testing.assert_allclose(res["u"]["std"], 1.0)


def test_pushforward_coverage_of_mean_is_one():
    draws = np.random.default_rng(0).normal(size=(30, 1))
    x = np.linspace(-1, 1, 4)
    mean = np.full(4, draws.mean())
    res = inf.pushforward(inf.IdentityPrior(1), None, draws, {"u": x}, truth={"u": mean})
    assert res["u"]["coverage_1"] == 1.0 and res["u"]["coverage_2"] == 1.0


def test_pushforward_needs_draws():
    with pytest.raises(ValueError):
        inf.pushforward(inf.IdentityPrior(1), None, np.zeros((0, 1)), {"u": [0.0]})


def test_coverage_counts():
    assert inf.coverage([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 1.5, 2.5], 2) == pytest.approx(2 / 3)


def test_output_files(tmp_path):
    draws = inf.PosteriorDraws(np.array([[0.1, 0.2], [0.3, 0.4]]), "nuts", 0.5, 0.61, 10, 0)
    inf.write_draws_csv(tmp_path / "d.csv", draws)
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "xi_0,xi_1"
    inf.write_grid_stats_csv(tmp_path / "g.csv", [0.0, 1.0], {"u": {"mean": np.zeros(2), "std": np.ones(2)}})
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "x,u_mean,u_std"
    inf.write_summary_json(tmp_path / "s.json", draws, inf.SamplerConfig())
    assert '"accept_rate": 0.61' in (tmp_path / "s.json").read_text()
