import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from funcprior import nets
from funcprior.stochastic import Kernel, sample_gp


def fixed_mlp(W, b):
    return [(jnp.asarray(W, jnp.float64), jnp.asarray(b, jnp.float64))]


def test_mlp_parameter_count():
    m = nets.Mlp((3, 5, 4, 1))
    params = m.init(jax.random.PRNGKey(0))
    assert m.n_params == (3 + 1) * 5 + (5 + 1) * 4 + (4 + 1) * 1
    assert sum(W.size + b.size for W, b in params) == m.n_params


def test_mlp_output_is_linear_by_default():
    m = nets.Mlp((1, 1))
    out = m(fixed_mlp([[5.0]], [1.0]), jnp.array([[3.0]]))
    assert float(out[0, 0]) == 16.0


def test_mlp_rejects_wrong_width():
    m = nets.Mlp((2, 3))
    with pytest.raises(ValueError):
        m(m.init(jax.random.PRNGKey(0)), jnp.zeros((4, 3)))


def geni_with_basis(vec):
    """GenI whose basis returns ``vec`` everywhere and whose residual is zero."""
    d = len(vec)
    g = nets.GenI(nets.Mlp((1, d)), nets.Mlp((d, d)))
    params = {
        "basis": fixed_mlp(np.zeros((1, d)), vec),
        "residual": fixed_mlp(np.zeros((d, d)), np.zeros(d)),
    }
    return g, params


def test_geni_inner_product():
    g, p = geni_with_basis([1.0, 2.0])
    assert float(g(p, jnp.array([[0.3]]), jnp.array([[3.0, -1.0]]))[0, 0]) == 1.0


def test_geni_zero_latent():
    g = nets.GenI.build(1, 4)
    p = g.init(jax.random.PRNGKey(1))
    # zero the last residual bias so that h*(0) = 0
    p["residual"][-1] = (p["residual"][-1][0], jnp.zeros(4))
    out = g(p, jnp.linspace(-1, 1, 7)[:, None], jnp.zeros((1, 4)))
    np.testing.assert_array_equal(np.asarray(out), 0.0)


def test_genii_zero_network():
    g = nets.GenII.build(1, 3)
    p = jax.tree_util.tree_map(jnp.zeros_like, g.init(jax.random.PRNGKey(0)))
    out = g(p, jnp.linspace(-1, 1, 5)[:, None], jnp.ones((2, 3)))
    assert out.shape == (2, 5)
    np.testing.assert_array_equal(np.asarray(out), 0.0)


def test_generator_dimension_mismatch():
    g = nets.GenI.build(1, 4)
    with pytest.raises(ValueError):
        g(g.init(jax.random.PRNGKey(0)), jnp.zeros((3, 2)), jnp.zeros((1, 4)))


def test_latent_scalar_range():
    s = nets.LatentScalar.build(5)
    a = s(s.init(jax.random.PRNGKey(0)), jax.random.normal(jax.random.PRNGKey(1), (100, 5)))
    assert np.all((np.asarray(a) > 1.0) & (np.asarray(a) < 2.0))


def deeponet_fixed(bvec, tvec):
    m = nets.DeepONet(nets.Mlp((1, len(bvec))), nets.Mlp((1, len(tvec))))
    p = {"branch": fixed_mlp(np.zeros((1, len(bvec))), bvec), "trunk": fixed_mlp(np.zeros((1, len(tvec))), tvec)}
    return m, p


def test_deeponet_inner_product():
    m, p = deeponet_fixed([1.0, 2.0], [3.0, 4.0])
    assert float(m(p, jnp.array([[0.7]]), jnp.array([[0.1]]))[0, 0]) == 11.0


def test_deeponet_zero_branch():
    m, p = deeponet_fixed([0.0, 0.0, 0.0], [3.0, 4.0, 5.0])
    out = m(p, jnp.array([[0.7]]), jnp.linspace(-1, 1, 9)[:, None])
    np.testing.assert_array_equal(np.asarray(out), 0.0)


def test_deeponet_sensor_mismatch():
    m = nets.DeepONet.build(10, 1, 8)
    with pytest.raises(ValueError):
        m(m.init(jax.random.PRNGKey(0)), jnp.zeros((2, 9)), jnp.zeros((3, 1)))


def test_adam_first_step():
    s = nets.adam_init({"w": jnp.array(0.0)}, lr=0.1)
    p, _ = nets.adam_step(s, {"w": jnp.array(0.0)}, {"w": jnp.array(1.0)})
    assert float(p["w"]) == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient():
    p = {"w": jnp.array([0.3, -2.0])}
    s = nets.adam_init(p, lr=0.1)
    for _ in range(5):
        p2, s = nets.adam_step(s, p, {"w": jnp.zeros(2)})
    np.testing.assert_array_equal(np.asarray(p2["w"]), [0.3, -2.0])


def test_adam_two_steps_monotone():
    p = {"w": jnp.array(0.0)}
    s = nets.adam_init(p, lr=0.1)
    p1, s = nets.adam_step(s, p, {"w": jnp.array(1.0)})
    p2, s = nets.adam_step(s, p1, {"w": jnp.array(1.0)})
    assert 0 > float(p1["w"]) > float(p2["w"])
    assert abs(float(p2["w"])) < 0.2


def test_adam_rejects_nonfinite():
    p = {"w": jnp.array(0.0)}
    with pytest.raises(nets.NonFiniteGradient):
        nets.adam_step(nets.adam_init(p), p, {"w": jnp.array(np.nan)})


def test_checkpoint_roundtrip(tmp_path):
    g = nets.GenI.build(2, 6, 8, 2, "sin", "tanh")
    p = g.init(jax.random.PRNGKey(3))
    nets.save_checkpoint(tmp_path / "g.ckpt", g, p, {"note": 1})
    g2, p2, extra = nets.load_checkpoint(tmp_path / "g.ckpt")
    assert g2 == g and extra == {"note": 1}
    for a, b in zip(jax.tree_util.tree_leaves(p), jax.tree_util.tree_leaves(p2)):
        np.testing.assert_array_equal(np.asarray(a), np.asarray(b))


def test_scaled_basis_init_range():
    g = nets.GenI.build(1, 6, 32, 2, basis_scale=8.0)
    W, b = g.init(jax.random.PRNGKey(0))["basis"][0]
    assert np.max(np.abs(W)) <= 8.0 and np.max(np.abs(W)) > 4.0
    assert np.max(np.abs(b)) <= 8.0 and np.max(np.abs(b)) > 4.0
    # the remaining layers keep Glorot
    W1, _ = g.init(jax.random.PRNGKey(0))["basis"][1]
    assert np.max(np.abs(W1)) <= np.sqrt(6.0 / 64)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 5), st.integers(0, 1000))
def test_scaled_basis_init_is_box_invariant(lo, width, seed):
    # same key, different coordinate box: features agree under the affine map between boxes
    ref = nets.GenI.build(1, 4, 8, 1, basis_scale=5.0)
    box = nets.GenI.build(1, 4, 8, 1, basis_scale=5.0, lo=(lo,), hi=(lo + width,))
    key = jax.random.PRNGKey(seed)
    pr, pb = ref.init(key), box.init(key)
    x = jnp.linspace(-1, 1, 7)[:, None]
    np.testing.assert_allclose(np.asarray(box.basis_values(pb, lo + (x + 1) * width / 2)),
                               np.asarray(ref.basis_values(pr, x)), rtol=1e-9, atol=1e-9)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        nets.load_checkpoint(tmp_path / "x")


def test_d2x_exact_matches_fd():
    g = nets.GenI.build(1, 5)
    p = g.init(jax.random.PRNGKey(0))
    x = jnp.linspace(-0.9, 0.9, 11)[:, None]
    xi = jax.random.normal(jax.random.PRNGKey(1), (3, 5))
    a = nets.generator_d2x(g, p, x, xi, "exact")
    b = nets.generator_d2x(g, p, x, xi, "fd", h=1e-3)
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), atol=1e-4)


def test_d2x_genii_exact_matches_fd():
    g = nets.GenII.build(1, 3, 16, 2)
    p = g.init(jax.random.PRNGKey(0))
    x = jnp.linspace(-0.5, 0.5, 5)[:, None]
    xi = jax.random.normal(jax.random.PRNGKey(1), (2, 3))
    np.testing.assert_allclose(np.asarray(nets.generator_d2x(g, p, x, xi, "exact")),
                               np.asarray(nets.generator_d2x(g, p, x, xi, "fd")), atol=1e-4)


def test_train_deeponet_identical_pairs():
    m = nets.DeepONet.build(5, 1, 16, (32, 2), (32, 2))
    p = m.init(jax.random.PRNGKey(0), jnp.float32)
    f = np.tile(np.linspace(0, 1, 5), (8, 1))
    x = np.linspace(-1, 1, 7)[:, None]
    u = np.tile(np.sin(np.pi * x[:, 0]), (8, 1))
    _, hist = nets.train_deeponet(m, p, f, x, u, 5000, lr=1e-3, batch_size=8, log_every=500)
    # float32 Adam jitter leaves a floor near 1e-4; relative to the signal power that is ~0
    assert hist[-1][1] < 1e-3 * np.mean(u**2)


def test_train_deeponet_rejects_bad_shapes():
    m = nets.DeepONet.build(5, 1, 4)
    with pytest.raises(ValueError):
        nets.train_deeponet(m, m.init(jax.random.PRNGKey(0)), np.zeros((3, 5)), np.zeros((4, 1)), np.zeros((3, 5)), 10)


def antiderivative_data(n, seed, m=50):
    x = np.linspace(0.0, 1.0, m)
    f = sample_gp(Kernel(0.2), x, n, seed)
    dx = x[1] - x[0]
    # trapezoid rule oracle for int_0^x f
    u = np.concatenate([np.zeros((n, 1)), np.cumsum(0.5 * dx * (f[:, 1:] + f[:, :-1]), axis=1)], axis=1)
    return x, f, u


@pytest.mark.slow
def test_deeponet_learns_antiderivative():
    x, f, u = antiderivative_data(1000, 0)
    m = nets.DeepONet.build(50, 1, 64, (64, 2), (64, 2), lo=(0.0,), hi=(1.0,))
    p = m.init(jax.random.PRNGKey(0), jnp.float32)
    p, hist = nets.train_deeponet(m, p, f, x[:, None], u, 20_000, lr=1e-3, batch_size=64, log_every=1000)
    _, ft, ut = antiderivative_data(200, 1)
    pred = np.asarray(m(nets.cast_params(p, jnp.float64), jnp.asarray(ft), jnp.asarray(x[:, None])))
    assert np.linalg.norm(pred - ut) / np.linalg.norm(ut) < 0.05


# --- properties -------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 1000))
def test_geni_linear_in_latent_features(c, seed):
    g = nets.GenI.build(1, 4, 8, 1)
    p = g.init(jax.random.PRNGKey(seed))
    x = jnp.linspace(-1, 1, 5)[:, None]
    xi = jax.random.normal(jax.random.PRNGKey(seed + 1), (2, 4))
    feats = g.latent_features(p, xi)
    basis = g.basis_values(p, x)
    np.testing.assert_allclose(np.asarray((c * feats) @ basis.T), c * np.asarray(g(p, x, xi)), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 1000))
def test_deeponet_linear_in_branch_output(c, seed):
    m = nets.DeepONet.build(4, 1, 6, (8, 1), (8, 1))
    p = m.init(jax.random.PRNGKey(seed))
    f = jax.random.normal(jax.random.PRNGKey(seed + 1), (3, 4))
    x = jnp.linspace(-1, 1, 5)[:, None]
    b, t = m.branch_out(p, f), m.trunk_out(p, x)
    np.testing.assert_allclose(np.asarray((c * b) @ t.T), c * np.asarray(m(p, f, x)), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_subnormal=False), min_size=1, max_size=6),
       st.lists(st.floats(-5, 5, allow_subnormal=False), min_size=1, max_size=6))
def test_adam_odd_symmetry_first_step(theta, grad):
    n = min(len(theta), len(grad))
    th, g = jnp.array(theta[:n]), jnp.array(grad[:n])
    a, _ = nets.adam_step(nets.adam_init({"w": th}, lr=0.01), {"w": th}, {"w": g})
    b, _ = nets.adam_step(nets.adam_init({"w": -th}, lr=0.01), {"w": -th}, {"w": -g})
    np.testing.assert_allclose(np.asarray(a["w"]), -np.asarray(b["w"]), atol=1e-15)
