"""Learned visual-protection transforms and ciphertext-only attack harness."""

__version__ = "0.1.0"
