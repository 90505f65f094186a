"""Two-stage malware detection and data-theft classification from usage telemetry."""

__version__ = "0.1.0"
