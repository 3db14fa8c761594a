"""Spiking networks trained with surrogate gradients and pruned to a resource budget by descent-ascent."""

__version__ = "0.1.0"
