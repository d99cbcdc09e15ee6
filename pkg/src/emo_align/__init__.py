"""Two-stage speech-language alignment (semantic, then emotion) at desk scale."""

__version__ = "0.1.0"
