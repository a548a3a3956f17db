"""Instance-aware prompting for continual learning of a tiny dual encoder."""

__version__ = "0.1.0"
