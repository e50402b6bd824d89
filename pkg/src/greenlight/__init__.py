"""Joint signal-timing and trajectory coordination for an isolated intersection."""

__version__ = "0.1.0"
