"""Multi-subject autoregressive image generation over palette tokens at desk scale."""

__version__ = "0.1.0"
