"""Meta-tuned classification losses and augmentation magnitudes for few-shot detection."""

__version__ = "0.1.0"
