"""Reinforcement-learning architecture search with a critic that can stand in
for training, a pool of trained blocks for initialization, and a replay
buffer of good architectures."""

__version__ = "0.1.0"
