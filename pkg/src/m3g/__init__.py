"""Multi-granular motion tokenization and audio-driven gesture generation."""

__version__ = "0.1.0"
