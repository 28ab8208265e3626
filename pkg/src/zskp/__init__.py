"""Tiled zero-weight-skipping CNN inference accelerator: simulator + toolchain."""

__version__ = "0.1.0"

from . import driver, engine, fifo, layout, metrics, netmodel, oracle, packer  # noqa: F401
