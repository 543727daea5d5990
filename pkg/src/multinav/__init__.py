"""Multitask language-grounded navigation on synthetic graph worlds."""

__version__ = "0.1.0"
