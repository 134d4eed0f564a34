"""Deterministic transformer decoding with confidence-gated early exits.

A desk-scale autoregressive decoder that can emit tokens from intermediate
layers when a trained lightweight head is confident, defer the skipped
layer work into batched computation alongside later tokens, and verify
every early prediction by modified rejection sampling so the output always
matches vanilla decoding.
"""

from .backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
