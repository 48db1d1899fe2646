"""Desk-scale evaluation toolkit for the multi-resolution / CrossMax ensemble
defense: the defense itself, adaptive attacks against it, gradient-masking
diagnostics and a standalone verifier for attack artifacts."""

__version__ = "0.1.0"
