"""Ground-to-aerial person search with head knowledge distillation."""

__version__ = "0.1.0"
