"""Desk-scale laboratory for test-time poisoning of test-time adaptation."""

__version__ = "0.1.0"
