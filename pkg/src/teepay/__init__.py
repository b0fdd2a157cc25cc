"""Duplex off-chain payment channels backed by emulated TEEs."""

__version__ = "0.1.0"
