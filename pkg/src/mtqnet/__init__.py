"""Multi-task pseudo-label learning for non-intrusive speech quality prediction."""

__version__ = "0.1.0"
