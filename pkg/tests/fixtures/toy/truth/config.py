"""Run settings for the damped momentum experiment."""

from dataclasses import dataclass


@dataclass
class Config:
    learning_rate: float = 0.1
    momentum: float = 0.9
    damping: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    n_samples: int = 512
    n_train: int = 384
    dim: int = 8
    noise: float = 0.1
