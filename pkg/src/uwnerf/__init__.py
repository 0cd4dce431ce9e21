"""Underwater radiance fields with perturbation-field Laplace uncertainty."""

__version__ = "0.1.0"
