"""Collaborative unsupervised domain adaptation with peer networks and a noise co-adaptation layer."""

__version__ = "0.1.0"
