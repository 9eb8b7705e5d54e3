"""Algorithm Distillation with selective state-space and transformer backbones."""

__version__ = "0.1.0"
