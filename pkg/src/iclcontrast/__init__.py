"""Contrastive-learning view of in-context learning: duality checks,
representational-shift analysis, mixed-effect models and anchored ICL runs."""

__version__ = "0.1.0"
