"""Extractor producing echo-lens trace files and attention sidecars."""

__version__ = "0.1.0"
