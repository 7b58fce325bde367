"""Transductive latent state representations for partially observed mountain car,
with rollout classification policy iteration on top."""

__version__ = "0.1.0"
