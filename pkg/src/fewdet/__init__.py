"""Few-shot detection on synthetic scenes with per-sample support prototypes."""

__version__ = "0.1.0"
