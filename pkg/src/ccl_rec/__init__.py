"""ccl_rec - hardness-aware contrastive learning for click-through sequential recommendation."""

__version__ = "0.1.0"
