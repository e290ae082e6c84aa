"""Desk-scale ENAS macro search with search-space poisoning."""

__version__ = "0.1.0"
