"""Spiking point-cloud Mamba: dynamic point encoding, LIF neurons, selective scans, energy accounting."""

__version__ = "0.1.0"
