"""Autoscaling control plane and serving simulator for multi-GPU LLM services."""

__version__ = "0.1.0"
