"""PINNs with R-function distance fields and bias-corrected adaptive weights."""

__version__ = "0.1.0"
