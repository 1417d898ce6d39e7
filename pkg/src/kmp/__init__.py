"""Graph-to-MLP knowledge distillation with kernel-matched hidden layers."""

__version__ = "0.1.0"
