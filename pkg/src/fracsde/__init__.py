"""Log-likelihood solvers for SDEs driven by Brownian and alpha-stable Levy noise."""

import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
