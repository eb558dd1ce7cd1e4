"""Return-conditioned action prediction with global/local selective state-space layers."""

__version__ = "0.1.0"
