"""Label-guided cross-modal distillation for BEV detection on a synthetic world."""

__version__ = "0.1.0"
