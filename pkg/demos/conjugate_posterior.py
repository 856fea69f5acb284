"""Latent-space posterior sampling on a problem with a known answer.

The "generator" is the identity on a 1-D latent, the prior is N(0, 1) and
one observation u = 1 carries unit noise, so the posterior is N(0.5, 0.5).
HMC and NUTS should both land there.
"""
import numpy as np

from funcprior import inference as inf

data = inf.observations("u", [0.0], [1.0], 1.0)
target = inf.LatentTarget(inf.IdentityPrior(1), None, data)

hmc = inf.sample_hmc(target, inf.SamplerConfig.hmc(n_samples=1000, burn_in=2000, seed=0))
nuts = inf.sample_nuts(target, inf.SamplerConfig(n_samples=1000, burn_in=2000, seed=1))

for name, d in (("HMC", hmc), ("NUTS", nuts)):
    x = d.samples[:, 0]
    print(f"{name:4s} mean {x.mean():.3f} +- {inf.mc_standard_error(x):.3f}   var {x.var():.3f}"
          f"   accept {d.accept_rate:.2f}   step {d.step_size:.3f}   ESS {inf.effective_sample_size(x):.0f}")
print("exact mean 0.500   var 0.500")

# Draws can be pushed through any prior model; with the identity they are just u.
stats = inf.pushforward(inf.IdentityPrior(1), None, nuts, {"u": np.zeros((1, 1))}, {"u": np.array([0.5])})["u"]
print("pushforward mean/std", float(stats["mean"][0]), float(stats["std"][0]))
