"""Desk-scale joint optimization of a discrete prompt policy and a differentiable mask tool."""

__version__ = "0.1.0"
