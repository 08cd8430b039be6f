"""Separation kernel toolchain checks and refinement harness."""

__version__ = "0.1.0"
