"""Learn a functional prior from Gaussian-process samples, then condition it.

A small end-to-end tour at toy budget (under two minutes on one core):

1. draw 2000 GP realizations at 30 sensors,
2. train a Gen I generator with WGAN-GP for a few thousand steps,
3. check the learned covariance against the kernel,
4. sample the latent posterior given 6 noisy point values and compare with GPR.

The experiment runner (``funcprior run-all --experiment gp-appendixB``) does
the same at the full desk budget and writes CSV/SVG artifacts.
"""
import time

import numpy as np

from funcprior import baselines as bl
from funcprior import gan, inference as inf, nets, stochastic as st

kernel = st.Kernel(0.2, 1.0)
sensors = np.linspace(-1, 1, 30)
train = st.assemble_snapshots({"u": (sensors, st.sample_gp(kernel, sensors, 2000, seed=0))})

model = gan.DataPrior(nets.GenI.build(1, 40, 64, 2, basis_scale=8.0), [st.Block("u", sensors)])
t0 = time.perf_counter()
res = gan.train_prior(model, train, gan.TrainConfig(steps=4000, seed=1))
print(f"trained 4000 steps in {time.perf_counter() - t0:.0f}s; last (step, L_G, L_D, penalty) {res.history[-1]}")
print("covariance MSE vs kernel", gan.covariance_mse(model, res.params, kernel, sensors))

# a truth drawn from the same kernel, observed at six points with small noise
rng = np.random.default_rng(3)
x_eval = np.linspace(-1, 1, 101)
x_obs = np.sort(rng.uniform(-1, 1, 6))
u = st.sample_gp(kernel, np.concatenate([x_eval, x_obs]), 1, seed=4)[0]
truth, y_obs = u[:101], u[101:] + 0.05 * rng.standard_normal(6)

target = inf.LatentTarget(model, res.params, inf.observations("u", x_obs, y_obs, 0.05))
draws = inf.sample_nuts(target, inf.SamplerConfig(n_samples=300, burn_in=300, seed=5))
post = inf.pushforward(model, res.params, draws, {"u": x_eval}, {"u": truth})["u"]
print(f"posterior: accept {draws.accept_rate:.2f}, coverage at 2 std {post['coverage_2']:.2f}, rmse {post['rmse']:.3f}")

gpr = bl.gpr_fit(x_obs, y_obs, optimize_hyper=False, lengthscale=0.2, noise_var=0.05**2)
mean, std = bl.gpr_predict(gpr, x_eval)
print(f"exact GPR: coverage at 2 std {np.mean(np.abs(mean - truth) <= 2 * std):.2f}, "
      f"rmse {np.sqrt(np.mean((mean - truth) ** 2)):.3f}")
