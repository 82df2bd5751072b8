"""Desk-scale multilingual speech-to-text toolkit with per-language adaptation."""
__version__ = "0.1.0"
