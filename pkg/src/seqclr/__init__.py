"""Sequence-to-sequence contrastive learning of visual representations for text recognition."""

__version__ = "0.1.0"
