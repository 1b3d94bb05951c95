"""Time-domain speaker extraction conditioned on i-vectors, built on numpy."""

__version__ = "0.1.0"
