"""Continuous-time score-based generative modelling on small toy problems."""

__version__ = "0.1.0"
