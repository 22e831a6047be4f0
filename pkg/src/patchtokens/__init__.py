"""Visual reference tokens: per-image vocabulary expansion and structured decoding."""

__version__ = "0.1.0"
