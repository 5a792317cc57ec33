"""Adversarial fine-tuning with a feature disentangler, on a small numpy autodiff core."""

__version__ = "0.1.0"
