"""Luminosity-corrected pupillometry for emotional arousal estimation."""

__version__ = "0.1.0"
