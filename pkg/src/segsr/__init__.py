"""Factorized atrous spatial pyramid back-end with sub-pixel upsampling, on numpy."""

__version__ = "0.1.0"
