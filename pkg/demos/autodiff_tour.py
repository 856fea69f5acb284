"""A short walk through the hand-written reverse-mode engine.

Run with ``python3 demos/autodiff_tour.py``.  Nothing here needs JAX.
"""
import numpy as np

from funcprior import autodiff as ad
from funcprior.gan import penalty_graph

# Graphs are built from placeholders, parameters and constants.
v = np.array([0.3, -1.2, 0.8])
x = ad.parameter("x", v)
y = ad.reduce_sum(ad.tanh(x) * ad.sin(x))
print("value   ", ad.evaluate(y))

g = ad.gradient(y)["x"]
exact = (1 - np.tanh(v) ** 2) * np.sin(v) + np.tanh(v) * np.cos(v)
print("gradient", g)
print("by hand ", exact)

# Central differences agree to roughly h^2.
h = 1e-6
f = lambda w: ad.evaluate(ad.reduce_sum(ad.tanh(ad.constant(w)) * ad.sin(ad.constant(w))))
print("central ", np.array([(f(v + h * e) - f(v - h * e)) / (2 * h) for e in np.eye(3)]))

# The gradient penalty needs the gradient *of a gradient*: the input
# gradient of a small leaky-ReLU critic is itself an expression, so the
# penalty can be differentiated again with respect to the weights.
rng = np.random.default_rng(0)
layers = [(rng.normal(0, 0.7, (4, 6)), rng.normal(0, 0.1, 6)),
          (rng.normal(0, 0.7, (6, 1)), rng.normal(0, 0.1, 1))]
T = rng.uniform(-1, 1, (5, 4))
pen, params = penalty_graph(layers, T)
print("penalty ", float(ad.evaluate(pen, {"T_hat": T})))
grads = ad.gradient(pen, bindings={"T_hat": T})
print("dP/dW0 shape", grads["W0"].shape, " |dP/dW0|max", np.abs(grads["W0"]).max())
