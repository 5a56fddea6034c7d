"""Two-scale logo metric learning with dual adversarial attention,
retrieval evaluation, and a self-contained autodiff core."""

__version__ = "0.1.0"
