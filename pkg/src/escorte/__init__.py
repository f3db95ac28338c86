"""Joint subject re-identification and online action detection for escort robots."""

__version__ = "0.1.0"
