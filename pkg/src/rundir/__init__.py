"""Tooling for runnable directories: self-contained, nestable units with
their own container images, tests and release stages."""

__version__ = "0.1.0"
