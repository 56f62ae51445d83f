"""Offline export of encoder outputs into adfuse feature-bank files."""

__version__ = "0.1.0"
