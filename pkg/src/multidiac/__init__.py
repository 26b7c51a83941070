"""Multimodal Arabic diacritization toolkit."""

__version__ = "0.1.0"
