# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#       jupytext_version: 1.11.3
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Noise schedule and deterministic inversion
#
# Everything here uses a hand-written "denoiser" so the algebra can be seen
# without a trained network.

import numpy as np

from mdae import diffusion

sched = diffusion.make_schedule("cosine", 1000)
sched.alpha_bar[[0, 1, 500, 999, 1000]]

# Forward noising and its algebraic inverse.

rng = np.random.default_rng(0)
x0 = rng.normal(size=(2, 10, 9))
eps = rng.normal(size=x0.shape)
x_t = diffusion.q_sample(x0, 400, eps, sched)
np.abs(diffusion.eps_from_x0(x_t, x0, 400, sched) - eps).max()

# An oracle that always answers x0: inverting and then decoding with the
# same step grid reproduces x0.

oracle = lambda x_t, t, z: x0
code = diffusion.stochastic_encode(x0, None, oracle, sched, steps=50)
rec = diffusion.decode(code, None, oracle, sched)
np.abs(rec - x0).max()

# A denoiser that only shrinks its input shows how the deterministic decode
# depends on x_T alone, while the stochastic mode needs a random source.

shrink = lambda x_t, t, z: 0.5 * x_t
a = diffusion.decode(code, None, shrink, sched)
b = diffusion.decode(code, None, shrink, sched)
np.array_equal(a, b)
