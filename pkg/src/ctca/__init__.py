"""Desk-scale hybrid CTC/attention speech recognizer, built from scratch."""

__version__ = "0.1.0"
