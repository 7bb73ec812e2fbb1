"""Numerics laboratory for tabular and approximate Q-learning with convergent DQN losses."""

__version__ = "0.1.0"
