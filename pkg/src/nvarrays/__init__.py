"""Desk-scale simulator for laser-written colour-centre arrays in diamond."""
__version__ = "0.1.0"
