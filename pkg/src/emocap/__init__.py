"""Emotion-aware caption rewards and group-relative policy optimisation at desk scale."""

__version__ = "0.1.0"
