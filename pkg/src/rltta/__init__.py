"""Reinforcement-learned test-time augmentation for real/fake image classifiers."""

__version__ = "0.1.0"
