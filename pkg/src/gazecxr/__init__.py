"""Gaze-overlay chest X-ray VLM evaluation pipeline."""

__version__ = "0.1.0"
