"""Activation-aware post-training pruning metrics on a desk-scale toy model."""

__version__ = "0.1.0"
