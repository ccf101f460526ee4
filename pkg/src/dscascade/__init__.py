"""Single-demonstration imitation via cascades of stable dynamical policies."""

__version__ = "0.1.0"
