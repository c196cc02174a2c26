"""Central-spin coherence simulator for NV-like defects in a nuclear spin bath."""

__version__ = "0.1.0"
