"""Spiking-network engine with Spike Activation Map explanations."""

__version__ = "0.1.0"
