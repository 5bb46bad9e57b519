"""Analog in-memory computing simulator for sinusoidal networks on memristive crossbars."""

__version__ = "0.1.0"
