"""Adversarial purification with a topological autoencoder and a reformer VAE.

Submodules: ``autodiff`` (numpy reverse-mode differentiation), ``topology``
(0-dimensional persistence and the topological loss), ``models``,
``attacks``, ``pipeline``, ``dataio``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
