"""Learn per-item biases that maximize top-k ranking metrics on recent data."""

__version__ = "0.1.0"
