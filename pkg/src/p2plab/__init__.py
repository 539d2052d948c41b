"""Peer-to-peer prosumer market simulation, expert scheduling and imitation learning."""

__version__ = "0.1.0"
