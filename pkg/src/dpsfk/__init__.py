"""Guided diffusion posterior sampling with Feynman-Kac path weights on analytic priors."""

__version__ = "0.1.0"
