"""Cooperative-perception trajectory anomaly detection on synthetic multi-agent scenes."""

__version__ = "0.1.0"
