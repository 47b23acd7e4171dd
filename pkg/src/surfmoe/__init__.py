"""Entropy-regularized mixture-of-experts gating for blending surface-field surrogates."""

__version__ = "0.1.0"
