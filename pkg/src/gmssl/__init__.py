"""Graph-matching self-supervised learning with blackbox solver gradients, plus post-hoc uncertainty for OOD indicators."""

__version__ = "0.1.0"
