import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcprior import autodiff as ad
from funcprior import gan, nets
from funcprior.physics import DIFFUSION_REACTION
from funcprior.stochastic import Block, Kernel, assemble_snapshots, sample_gp


def linear_disc(w):
    d = gan.Discriminator(nets.Mlp((len(w), 1), "leaky_relu"))
    return d, [(jnp.asarray(np.array(w)[:, None], jnp.float64), jnp.zeros(1, jnp.float64))]


def tiny_disc(seed, n=3, activation="tanh"):
    d = gan.Discriminator(nets.Mlp((n, 5, 4, 1), activation))
    return d, d.init(jax.random.PRNGKey(seed))


def fd_tree(f, tree, h=1e-6):
    """Central differences of scalar ``f`` with respect to every leaf entry of ``tree``."""
    leaves, treedef = jax.tree_util.tree_flatten(tree)
    out = []
    for li, leaf in enumerate(leaves):
        leaf = np.asarray(leaf, dtype=np.float64)
        g = np.zeros_like(leaf)
        for idx in np.ndindex(leaf.shape):
            vals = []
            for s in (1, -1):
                pert = leaf.copy()
                pert[idx] += s * h
                moved = [jnp.asarray(pert) if j == li else l for j, l in enumerate(leaves)]
                vals.append(float(f(jax.tree_util.tree_unflatten(treedef, moved))))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        out.append(g)
    return out


def max_rel(a, b):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# --- fake snapshots ---------------------------------------------------------


def test_fake_snapshot_zero_latent_geni():
    g = nets.GenI.build(1, 4)
    p = g.init(jax.random.PRNGKey(0))
    p["residual"][-1] = (p["residual"][-1][0], jnp.zeros(4))
    model = gan.DataPrior(g, [Block("u", np.linspace(-1, 1, 6))])
    row = gan.fake_snapshot(model, {"u": p}, jnp.zeros((1, 4)))
    assert row.shape == (1, 6)
    np.testing.assert_array_equal(np.asarray(row), 0.0)


def test_fake_snapshot_pinn_zero_function():
    g = nets.GenII.build(1, 3)
    p = jax.tree_util.tree_map(jnp.zeros_like, g.init(jax.random.PRNGKey(0)))
    blocks = [Block("u", [-0.5, 0.5]), Block("f", np.linspace(-1, 1, 5)), Block("b", [-1.0, 1.0])]
    model = gan.PinnPrior(g, DIFFUSION_REACTION, blocks)
    row = gan.fake_snapshot(model, {"u": p}, jax.random.normal(jax.random.PRNGKey(1), (4, 3)))
    assert row.shape == (4, 9)
    np.testing.assert_array_equal(np.asarray(row), 0.0)


def test_fake_snapshot_operator_composition():
    g = nets.GenII.build(1, 3, 16, 2)
    pg = g.init(jax.random.PRNGKey(0))
    sensors = np.linspace(-1, 1, 6)
    don = nets.DeepONet.build(6, 1, 8, (16, 2), (16, 2))
    pd = don.init(jax.random.PRNGKey(1))
    x_u = np.linspace(-0.8, 0.8, 4)
    model = gan.OperatorPrior(g, "f", sensors[:, None], don, pd, "u",
                              [Block("u", x_u), Block("f", sensors)])
    xi = jax.random.normal(jax.random.PRNGKey(2), (3, 3))
    row = np.asarray(gan.fake_snapshot(model, {"f": pg}, xi))
    f_block = row[:, 4:]
    expected = np.asarray(don(pd, jnp.asarray(f_block), jnp.asarray(x_u[:, None])))
    np.testing.assert_allclose(row[:, :4], expected, atol=1e-12)


def test_fake_snapshot_noise_needs_key():
    g = nets.GenI.build(1, 2)
    model = gan.DataPrior(g, [Block("u", [0.0, 0.5], noise_std=0.1)])
    p = {"u": g.init(jax.random.PRNGKey(0))}
    with pytest.raises(ValueError):
        gan.fake_snapshot(model, p, jnp.zeros((2, 2)))
    noisy = gan.fake_snapshot(model, p, jnp.zeros((2, 2)), jax.random.PRNGKey(5))
    assert not np.allclose(np.asarray(noisy), np.asarray(gan.fake_snapshot(model.with_blocks(
        [Block("u", [0.0, 0.5])]), p, jnp.zeros((2, 2)))))


def test_layout_mismatch_rejected():
    g = nets.GenI.build(1, 2)
    model = gan.DataPrior(g, [Block("u", np.linspace(-1, 1, 5))])
    real = assemble_snapshots({"u": (np.linspace(-1, 1, 4), np.zeros((3, 4)))})
    with pytest.raises(ValueError):
        gan.train_prior(model, real, gan.TrainConfig(steps=0))


# --- losses -----------------------------------------------------------------


def test_linear_disc_identical_batches():
    d, rho = linear_disc([1.2, 1.6])
    T = jax.random.normal(jax.random.PRNGKey(0), (8, 2), jnp.float64)
    loss, pen = gan.discriminator_loss(d, rho, T, T, 0.1, jax.random.PRNGKey(1))
    # ||w|| = 2 exactly; the norm epsilon shifts the value by ~1e-13
    assert float(loss) == pytest.approx(0.1, abs=1e-10)
    assert float(pen) == pytest.approx(1.0, abs=1e-10)


def test_constant_disc_zero_penalty_weight():
    d = gan.Discriminator(nets.Mlp((3, 1), "leaky_relu"))
    rho = [(jnp.zeros((3, 1)), jnp.array([2.5]))]
    real = jnp.ones((4, 3))
    fake = -jnp.ones((4, 3))
    loss, _ = gan.discriminator_loss(d, rho, real, fake, 0.0, eps=jnp.full(4, 0.5))
    assert float(loss) == 0.0


def test_discriminator_loss_batch_mismatch():
    d, rho = linear_disc([1.0, 1.0])
    with pytest.raises(ValueError):
        gan.discriminator_loss(d, rho, jnp.zeros((3, 2)), jnp.zeros((4, 2)), 0.1, jax.random.PRNGKey(0))


def test_generator_loss_zero_disc():
    d = gan.Discriminator(nets.Mlp((2, 1)))
    rho = [(jnp.zeros((2, 1)), jnp.zeros(1))]
    assert float(gan.generator_loss(d, rho, jnp.ones((5, 2)))) == 0.0


def test_generator_loss_sum_disc():
    d, rho = linear_disc([1.0, 1.0])
    assert float(gan.generator_loss(d, rho, jnp.tile(jnp.array([1.0, 2.0]), (6, 1)))) == -3.0


def test_discriminator_loss_gradient_matches_fd():
    d, rho = tiny_disc(0)
    rng = np.random.default_rng(0)
    real, fake = jnp.asarray(rng.normal(size=(6, 3))), jnp.asarray(rng.normal(size=(6, 3)))
    eps = jnp.asarray(rng.uniform(size=6))

    def loss(r):
        return gan.discriminator_loss(d, r, real, fake, 0.1, eps=eps)[0]

    auto = jax.tree_util.tree_leaves(jax.grad(loss)(rho))
    assert max_rel(auto, fd_tree(loss, rho)) < 1e-4


def test_generator_loss_gradient_matches_fd():
    g = nets.GenI.build(1, 3, 6, 1)
    model = gan.DataPrior(g, [Block("u", np.linspace(-1, 1, 3))])
    eta = {"u": g.init(jax.random.PRNGKey(3))}
    d, rho = tiny_disc(4)
    xi = jax.random.normal(jax.random.PRNGKey(5), (5, 3), jnp.float64)

    def loss(e):
        return gan.generator_loss(d, rho, gan.fake_snapshot(model, e, xi))

    auto = jax.tree_util.tree_leaves(jax.grad(loss)(eta))
    assert max_rel(auto, fd_tree(loss, eta)) < 1e-4


def test_linear_disc_no_penalty_gradient_is_mean_difference():
    d, rho = linear_disc([0.3, -0.4, 0.9])
    rng = np.random.default_rng(2)
    real, fake = jnp.asarray(rng.normal(size=(7, 3))), jnp.asarray(rng.normal(size=(7, 3)))
    g = jax.grad(lambda r: gan.discriminator_loss(d, r, real, fake, 0.0, eps=jnp.zeros(7))[0])(rho)
    np.testing.assert_allclose(np.asarray(g[0][0])[:, 0], np.asarray(fake.mean(0) - real.mean(0)), atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_penalty_two_engines_agree(seed):
    # the in-house graph engine and jax must agree on the penalty and on its parameter gradient
    rng = np.random.default_rng(seed)
    layers = [(rng.normal(0, 0.7, (3, 6)), rng.normal(0, 0.1, 6)),
              (rng.normal(0, 0.7, (6, 1)), rng.normal(0, 0.1, 1))]
    T = rng.uniform(-1, 1, (5, 3))
    expr, _ = gan.penalty_graph(layers, T, activation="tanh")
    ours = float(ad.evaluate(expr, {"T_hat": T}))
    ours_grad = ad.gradient(expr, bindings={"T_hat": T})

    d = gan.Discriminator(nets.Mlp((3, 6, 1), "tanh"))
    rho = [(jnp.asarray(W), jnp.asarray(b)) for W, b in layers]
    ref = float(gan.gradient_penalty(d, rho, jnp.asarray(T)))
    ref_grad = jax.grad(lambda r: gan.gradient_penalty(d, r, jnp.asarray(T)))(rho)
    assert ours == pytest.approx(ref, rel=1e-10, abs=1e-14)
    np.testing.assert_allclose(ours_grad["W0"], np.asarray(ref_grad[0][0]), rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(ours_grad["b0"], np.asarray(ref_grad[0][1]), rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(ours_grad["W1"], np.asarray(ref_grad[1][0]), rtol=1e-8, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_penalty_interpolation_symmetry(seed):
    d, rho = tiny_disc(seed % 1000, activation="leaky_relu")
    rng = np.random.default_rng(seed)
    real, fake = jnp.asarray(rng.normal(size=(4, 3))), jnp.asarray(rng.normal(size=(4, 3)))
    eps = jnp.asarray(rng.uniform(size=4))
    _, a = gan.discriminator_loss(d, rho, real, fake, 0.1, eps=eps)
    _, b = gan.discriminator_loss(d, rho, fake, real, 0.1, eps=1.0 - eps)
    assert float(a) == pytest.approx(float(b), rel=1e-12, abs=1e-14)


# --- training ---------------------------------------------------------------


def small_gp_problem(n_rows=200, n_sensors=8):
    x = np.linspace(-1, 1, n_sensors)
    real = assemble_snapshots({"u": (x, sample_gp(Kernel(0.4), x, n_rows, seed=0))})
    g = nets.GenI.build(1, 4, 16, 2)
    return gan.DataPrior(g, real.blocks), real, x


def test_train_config_validation():
    with pytest.raises(ValueError):
        gan.TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        gan.TrainConfig(ratio=0)


def test_zero_steps_is_bitwise_noop():
    model, real, _ = small_gp_problem()
    p0 = model.init(jax.random.PRNGKey(7))
    res = gan.train_prior(model, real, gan.TrainConfig(steps=0), params=p0)
    assert res.history == []
    for a, b in zip(jax.tree_util.tree_leaves(p0), jax.tree_util.tree_leaves(res.params)):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_training_is_deterministic(tmp_path):
    model, real, _ = small_gp_problem()
    cfg = gan.TrainConfig(steps=40, log_every=20, disc_width=16, seed=3,
                          checkpoint_every=20, checkpoint_dir=str(tmp_path))
    a = gan.train_prior(model, real, cfg)
    b = gan.train_prior(model, real, cfg)
    assert a.history == b.history and len(a.history) == 2
    for x, y in zip(jax.tree_util.tree_leaves(a.params), jax.tree_util.tree_leaves(b.params)):
        np.testing.assert_array_equal(np.asarray(x), np.asarray(y))
    assert (tmp_path / "u_step40.ckpt").exists()
    gan.write_loss_history(tmp_path / "loss.csv", a.history)
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "step,L_G,L_D,penalty"


def test_empty_training_set():
    model, real, _ = small_gp_problem()
    empty = assemble_snapshots({"u": (real.blocks[0].coords[:, 0], np.zeros((0, 8)))})
    with pytest.raises(ValueError):
        gan.train_prior(model, empty, gan.TrainConfig(steps=1))


@pytest.mark.slow
def test_training_improves_covariance():
    model, real, x = small_gp_problem(1000)
    cfg = gan.TrainConfig(steps=3000, disc_width=64, seed=0, lr=5e-4)
    p0 = model.init(jax.random.PRNGKey(0))
    res = gan.train_prior(model, real, cfg, params=p0)
    before = gan.covariance_mse(model, p0, Kernel(0.4), x, 2000)
    after = gan.covariance_mse(model, res.params, Kernel(0.4), x, 2000)
    assert after < before


# --- covariance diagnostic --------------------------------------------------


class ExactGp(gan.PriorModel):
    """The GP sampler itself, written as a latent generator ``u = L xi``."""

    def __init__(self, kernel, coords):
        self.coords = np.asarray(coords, dtype=np.float64)
        K = kernel(self.coords[:, None]) + 1e-12 * np.eye(self.coords.size)
        self.L = jnp.asarray(np.linalg.cholesky(K))
        self.components = {"u": nets.Mlp((self.coords.size, 1))}
        self.blocks = [Block("u", self.coords)]

    @property
    def latent_dim(self):
        return self.coords.size

    def evaluate(self, params, xi, var, coords):
        return xi @ self.L.T


def test_covariance_mse_identical_is_zero():
    x = np.linspace(-1, 1, 6)
    model = ExactGp(Kernel(0.3), x)
    C_hat = np.cov(model.sample(None, "u", x, 3000, seed=4), rowvar=False)
    assert gan.covariance_mse(model, None, C_hat, x, 3000, seed=4) == 0.0


def test_covariance_mse_needs_samples():
    x = np.linspace(-1, 1, 4)
    with pytest.raises(ValueError):
        gan.covariance_mse(ExactGp(Kernel(0.3), x), None, Kernel(0.3), x, 999)


def test_covariance_mse_of_true_sampler_within_mc_bound():
    x = np.linspace(-1, 1, 12)
    k = Kernel(0.3)
    n = 100_000
    mse = gan.covariance_mse(ExactGp(k, x), None, k, x, n, seed=1)
    C = k(x[:, None])
    # E[(C_hat_ij - C_ij)^2] = (C_ii C_jj + C_ij^2) / n for Gaussian draws
    expected = float(np.mean((np.outer(np.diag(C), np.diag(C)) + C**2) / n))
    assert mse < 3 * expected


def test_covariance_mse_relative():
    x = np.linspace(-1, 1, 5)
    k = Kernel(0.3)
    m = ExactGp(k, x)
    a = gan.covariance_mse(m, None, k, x, 2000, seed=2)
    b = gan.covariance_mse(m, None, k, x, 2000, seed=2, relative=True)
    assert b == pytest.approx(a / np.mean(k(x[:, None]) ** 2))
