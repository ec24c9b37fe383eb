"""Content-enriched sequential recommendation via prompt-tuned text generation."""

__version__ = "0.1.0"
