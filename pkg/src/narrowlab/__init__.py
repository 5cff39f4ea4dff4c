"""Desk-scale laboratory for real-word subject customization with adaptive mask guidance."""

__version__ = "0.1.0"
