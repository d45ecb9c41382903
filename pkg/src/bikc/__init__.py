"""Keypose-conditioned consistency policies for a planar bimanual simulator."""

__version__ = "0.1.0"
