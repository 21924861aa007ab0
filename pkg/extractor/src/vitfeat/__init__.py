"""Deep-learning bridge: runs a self-supervised ViT and emits patch key
features and crop CLS features in the DTF1 interchange format consumed by
the mask-distillation engine."""

__version__ = "0.1.0"
