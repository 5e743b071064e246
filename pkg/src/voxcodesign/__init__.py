"""Differentiable soft-robot simulation, universal control, and evolutionary co-design."""
from . import controller, envgen, evolution, gradients, morphospace, physics, training  # noqa: F401

__version__ = "0.1.0"
