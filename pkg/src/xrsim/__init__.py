"""Deterministic simulator for cloud-rendered XR streaming over a congested network."""

__version__ = "0.1.0"
