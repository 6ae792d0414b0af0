"""Learned Bayesian Cramer-Rao bounds from parameter-measurement data.

Two routes to the bound: the posterior approach (one conditional score
network) and the measurement-prior approach (separate Fisher and prior
score networks, trainable with Fisher score matching and optionally
physics-encoded).  Closed-form oracles on the linear, one-bit quantized,
and frequency-estimation models back the test and diagnostics suites.
"""

from .kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
