"""Rotation-invariant VAEs for out-of-distribution pair matching, on a small numpy autodiff."""

__version__ = "0.1.0"
