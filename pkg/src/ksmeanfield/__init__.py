"""Signal-dependent Keller-Segel simulator and particle approximation harness."""

__version__ = "0.1.0"
