"""Evolved landmark-relative patches as compact CNN inputs."""

__version__ = "0.1.0"
