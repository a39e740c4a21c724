"""Backend-exchange adapters for the divergen engine."""

__version__ = "0.1.0"
