"""Co-evolving curriculum and executor agents trained from self-consistency signals."""

__version__ = "0.1.0"
