"""Heatmap-alignment cell tracking for volumetric time-lapse data."""
__version__ = "0.1.0"

from . import align, assoc, detect, metrics, synth, track, volume  # noqa: E402
