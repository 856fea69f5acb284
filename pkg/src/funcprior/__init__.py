"""Functional priors learned by physics-informed WGAN-GP generators, with
latent-space posterior sampling by HMC/NUTS."""
import jax

# posterior sampling and solvers run in float64; GAN training casts down explicitly
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
