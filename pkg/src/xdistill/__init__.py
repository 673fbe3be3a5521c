"""Self-supervised monocular depth with cross-task distillation from segmentation."""

__version__ = "0.1.0"
