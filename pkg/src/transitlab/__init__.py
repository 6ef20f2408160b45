"""Desk-scale laboratory for write caches in front of a BTT-formatted
persistent-memory block device."""

__version__ = "0.1.0"
